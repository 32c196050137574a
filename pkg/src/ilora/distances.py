"""Training distances, configuration, and run logging shared by all loops."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .intrinsics import IntrinsicKind


class DistanceMetric(Enum):
    COS_PLUS_L1 = "cos_plus_l1"
    MSE = "mse"


def distance(
    metric: DistanceMetric,
    x: torch.Tensor,
    y: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Masked distance between two (..., H, W, C) or (..., C, H, W) fields.

    cos_plus_l1 = mean_p [1 - cos(x_p, y_p)] + mean_{p,c} |x - y|, with the
    channel axis assumed to be the last; a zero-norm pair contributes cosine 0
    (orthogonal convention). Differentiable in x.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if mask is None:
        mask = torch.ones(x.shape[:-1], dtype=torch.bool, device=x.device)
    m = mask.to(x.dtype)
    n_valid = m.sum().clamp(min=1)
    if metric is DistanceMetric.MSE:
        sq = ((x - y) ** 2).mean(dim=-1)
        return (sq * m).sum() / n_valid
    if x.shape[-1] != 3:
        raise ValueError("cos_plus_l1 is defined for 3-channel direction fields")
    eps = 1e-8
    dot = (x * y).sum(dim=-1)
    norms = x.norm(dim=-1) * y.norm(dim=-1)
    cos = torch.where(norms > eps, dot / norms.clamp(min=eps), torch.zeros_like(dot))
    cos_term = ((1.0 - cos) * m).sum() / n_valid
    l1_term = ((x - y).abs().mean(dim=-1) * m).sum() / n_valid
    return cos_term + l1_term


@dataclass
class TrainConfig:
    kind: IntrinsicKind
    budget: int = 250
    rank: int = 8
    selector: str = "all_attn"
    learning_rate: float = 1e-4  # 1e-3 for the GAN/VQ loops
    batch_size: int = 4
    max_steps: int = 2000
    seed: int = 0
    metric: DistanceMetric = DistanceMetric.MSE

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["kind"] = self.kind.value
        d["metric"] = self.metric.value
        return d


def select_budget_indices(train_indices: list[int], budget: int, seed: int) -> list[int]:
    """Deterministic budget subset: seeded shuffle, take `budget`, stable sort."""
    if budget > len(train_indices):
        raise ValueError(f"budget {budget} exceeds train split size {len(train_indices)}")
    rng = np.random.default_rng([0xB0D6E7, seed])
    perm = rng.permutation(len(train_indices))[:budget]
    return sorted(train_indices[i] for i in perm)


class TrainLog:
    """JSON-lines step log: {step, loss, wall_ms, peak_mem_bytes} per record."""

    def __init__(self):
        self.records: list[dict] = []
        self.extras: dict = {}
        self._t0 = time.monotonic()

    def log(self, step: int, loss: float, **extra) -> None:
        rec = {
            "step": step,
            "loss": float(loss),
            "wall_ms": int((time.monotonic() - self._t0) * 1000),
            "peak_mem_bytes": _peak_rss_bytes(),
        }
        rec.update(extra)
        self.records.append(rec)

    @property
    def final_loss(self) -> float:
        return self.records[-1]["loss"] if self.records else float("nan")

    def steps_per_sec(self) -> float:
        if len(self.records) < 2:
            return float("nan")
        a, b = self.records[0], self.records[-1]
        dt = (b["wall_ms"] - a["wall_ms"]) / 1000.0
        return (b["step"] - a["step"]) / max(dt, 1e-9)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _peak_rss_bytes() -> int:
    import resource

    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
