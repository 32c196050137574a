"""Run-directory conventions: every command writes a self-describing directory
runs/<name>/{config.json, adapters.ilra, log.jsonl, metrics.json} whose
artifacts carry the config hash."""

from __future__ import annotations

import json
from pathlib import Path

from .metrics import config_hash


class RunDirError(RuntimeError):
    pass


def create_run_dir(out: str | Path, config: dict) -> Path:
    """Create a fresh run directory and persist the config (with its hash)."""
    out = Path(out)
    if (out / "config.json").exists():
        raise RunDirError(f"refusing to overwrite existing run directory {out}")
    out.mkdir(parents=True, exist_ok=True)
    payload = dict(config)
    payload["config_hash"] = config_hash(config)
    (out / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    return out


def read_config(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / "config.json").read_text())


def read_metrics(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "metrics.json"
    if not path.exists():
        raise RunDirError(f"{run_dir} has no metrics.json")
    return json.loads(path.read_text())
