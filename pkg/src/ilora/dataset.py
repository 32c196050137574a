"""Dataset generation and on-disk layout.

Layout (all tensors in NTF format):

    out_dir/
      manifest.json
      samples/000000.rgb.ntf        # model space [-1, 1], H x W x 3
      samples/000000.normal.ntf     # H x W x 3 unit vectors
      samples/000000.depth.ntf      # H x W x 1 meters
      samples/000000.albedo.ntf     # H x W x 3 in [0, 1]
      samples/000000.shading.ntf    # H x W x 1
      samples/000000.mask.ntf       # H x W uint8
      samples/000000.spec.json

Splits are 80/10/10 by index (train first). Depth codec bounds are the exact
empirical min/max over the written depth maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .intrinsics import CodecParams, Image, IntrinsicKind, IntrinsicMap
from .ntf import read_ntf, write_ntf
from .scenes import SHADING_MAX, SceneSample, SceneSpec, render_scene, sample_scene_spec

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    n_samples: int
    resolution: int
    seed: int
    splits: dict[str, int]  # {"train": n, "val": n, "test": n}
    depth_min: float
    depth_max: float
    shading_max: float

    @property
    def codec_params(self) -> CodecParams:
        return CodecParams(self.depth_min, self.depth_max, self.shading_max)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "n_samples": self.n_samples,
            "resolution": self.resolution,
            "seed": self.seed,
            "splits": self.splits,
            "depth_min": self.depth_min,
            "depth_max": self.depth_max,
            "shading_max": self.shading_max,
        }


def split_sizes(n: int) -> dict[str, int]:
    n_val = n // 10
    n_test = n // 10
    return {"train": n - n_val - n_test, "val": n_val, "test": n_test}


def sample_seed(dataset_seed: int, index: int) -> int:
    # per-sample seeds so generation can parallelize without changing bits
    return int(np.random.default_rng([dataset_seed, index]).integers(0, 2**63))


def generate_dataset(
    n: int, seed: int, resolution: int, out_dir: str | Path, difficulty: str = "standard"
) -> DatasetManifest:
    if n < 10:
        raise ValueError(f"need at least 10 samples, got {n}")
    out = Path(out_dir)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)

    depth_min = np.inf
    depth_max = -np.inf
    for i in range(n):
        s = sample_seed(seed, i)
        spec = sample_scene_spec(s, difficulty)
        sample = render_scene(spec, resolution, seed=s)
        stem = samples_dir / f"{i:06d}"
        write_ntf(f"{stem}.rgb.ntf", sample.rgb.data)
        write_ntf(f"{stem}.normal.ntf", sample.normal.data)
        write_ntf(f"{stem}.depth.ntf", sample.depth.data)
        write_ntf(f"{stem}.albedo.ntf", sample.albedo.data)
        write_ntf(f"{stem}.shading.ntf", sample.shading.data)
        write_ntf(f"{stem}.mask.ntf", sample.normal.mask.astype("u1"))
        Path(f"{stem}.spec.json").write_text(spec.to_json())
        depth_min = min(depth_min, float(sample.depth.data.min()))
        depth_max = max(depth_max, float(sample.depth.data.max()))

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        n_samples=n,
        resolution=resolution,
        seed=seed,
        splits=split_sizes(n),
        depth_min=depth_min,
        depth_max=depth_max,
        shading_max=SHADING_MAX,
    )
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=1))
    return manifest


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        d = json.loads((self.root / "manifest.json").read_text())
        self.manifest = DatasetManifest(
            version=d["version"],
            n_samples=d["n_samples"],
            resolution=d["resolution"],
            seed=d["seed"],
            splits=d["splits"],
            depth_min=d["depth_min"],
            depth_max=d["depth_max"],
            shading_max=d["shading_max"],
        )

    def __len__(self) -> int:
        return self.manifest.n_samples

    def split_indices(self, split: str) -> list[int]:
        sizes = self.manifest.splits
        starts = {
            "train": 0,
            "val": sizes["train"],
            "test": sizes["train"] + sizes["val"],
        }
        if split not in starts:
            raise ValueError(f"unknown split {split!r}")
        start = starts[split]
        return list(range(start, start + sizes[split]))

    def load(self, index: int) -> SceneSample:
        stem = self.root / "samples" / f"{index:06d}"
        mask = read_ntf(f"{stem}.mask.ntf").astype(bool)
        spec = SceneSpec.from_json(Path(f"{stem}.spec.json").read_text())
        return SceneSample(
            rgb=Image(data=read_ntf(f"{stem}.rgb.ntf")),
            normal=IntrinsicMap(IntrinsicKind.NORMAL, read_ntf(f"{stem}.normal.ntf"), mask),
            depth=IntrinsicMap(IntrinsicKind.DEPTH, read_ntf(f"{stem}.depth.ntf"), mask),
            albedo=IntrinsicMap(IntrinsicKind.ALBEDO, read_ntf(f"{stem}.albedo.ntf"), mask),
            shading=IntrinsicMap(IntrinsicKind.SHADING, read_ntf(f"{stem}.shading.ntf"), mask),
            spec=spec,
            seed=sample_seed(self.manifest.seed, index),
        )

    def load_rgb(self, index: int) -> np.ndarray:
        return read_ntf(self.root / "samples" / f"{index:06d}.rgb.ntf")

    def load_intrinsic(self, index: int, kind: IntrinsicKind) -> IntrinsicMap:
        stem = self.root / "samples" / f"{index:06d}"
        mask = read_ntf(f"{stem}.mask.ntf").astype(bool)
        return IntrinsicMap(kind, read_ntf(f"{stem}.{kind.value}.ntf"), mask)
