"""Quantitative evaluation: normals/depth/albedo/shading statistics, the
random-feature Fréchet quality proxy, and the quality-vs-recovery correlation
experiment."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .intrinsics import IntrinsicKind, IntrinsicMap


class MetricError(ValueError):
    pass


def _check_mask(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        raise MetricError("empty mask: no valid pixels to evaluate")
    return mask


def angular_errors(pred: IntrinsicMap, gt: IntrinsicMap, mask: np.ndarray | None = None):
    """Mean and median per-pixel angular error in degrees; the prediction is
    renormalized first and zero-norm prediction pixels count as 90 degrees."""
    if mask is None:
        mask = pred.mask & gt.mask
    _check_mask(mask)
    p = pred.data[mask].astype(np.float64)
    g = gt.data[mask].astype(np.float64)
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(g, axis=1)
    p = np.where(pn[:, None] > 1e-9, p / np.maximum(pn, 1e-9)[:, None], 0.0)
    g = g / np.maximum(gn, 1e-9)[:, None]
    cos = np.clip((p * g).sum(axis=1), -1.0, 1.0)
    theta = np.degrees(np.arccos(cos))
    theta = np.where(pn > 1e-9, theta, 90.0)
    return float(theta.mean()), float(np.median(theta))


def l1_error_x100(pred: IntrinsicMap, gt: IntrinsicMap, mask: np.ndarray | None = None) -> float:
    """100 x mean absolute error over valid pixels and channels, physical space."""
    if mask is None:
        mask = pred.mask & gt.mask
    _check_mask(mask)
    diff = np.abs(pred.data[mask].astype(np.float64) - gt.data[mask].astype(np.float64))
    return float(100.0 * diff.mean())


@dataclass(frozen=True)
class DepthMetrics:
    rms: float
    delta_125: float


def depth_metrics(pred: IntrinsicMap, gt: IntrinsicMap, mask: np.ndarray | None = None) -> DepthMetrics:
    """Metric-depth RMS and the delta < 1.25 accuracy fraction (no alignment)."""
    if mask is None:
        mask = pred.mask & gt.mask
    _check_mask(mask)
    p = np.maximum(pred.data[mask].astype(np.float64), 1e-6).ravel()
    g = gt.data[mask].astype(np.float64).ravel()
    if (g <= 0).any():
        raise MetricError("ground-truth depth must be positive on valid pixels")
    rms = float(np.sqrt(((p - g) ** 2).mean()))
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(rms=rms, delta_125=float((ratio < 1.25).mean()))


def rms_error(pred: IntrinsicMap, gt: IntrinsicMap, mask: np.ndarray | None = None) -> float:
    if mask is None:
        mask = pred.mask & gt.mask
    _check_mask(mask)
    diff = pred.data[mask].astype(np.float64) - gt.data[mask].astype(np.float64)
    return float(np.sqrt((diff**2).mean()))


class _RandomFeatures(nn.Module):
    """Fixed, seed-determined random conv embedding to a 64-dim vector."""

    def __init__(self, seed: int):
        super().__init__()
        torch.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 4, stride=2, padding=1),
            nn.Tanh(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.Tanh(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.Tanh(),
        )
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(2, 3))


def embed_images(images: np.ndarray, seed: int) -> np.ndarray:
    """(N, H, W, 3) model-space images -> (N, 64) features."""
    net = _RandomFeatures(seed)
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    with torch.no_grad():
        return net(x).numpy().astype(np.float64)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)) with a symmetric PSD
    square root (eigenvalues clipped at 0); a tiny ridge handles degeneracy."""
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    sa = np.cov(feats_a, rowvar=False)
    sb = np.cov(feats_b, rowvar=False)
    ridge = 1e-6 * np.eye(sa.shape[0])
    sa = sa + ridge
    sb = sb + ridge
    # symmetric route: sqrt(Sa) Sb sqrt(Sa) has the same eigenvalues as Sa Sb
    wa, va = np.linalg.eigh(sa)
    root_a = va @ np.diag(np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    inner = root_a @ sb @ root_a
    w = np.linalg.eigvalsh(inner)
    trace_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2.0 * trace_sqrt)
    return max(d2, 0.0)


def quality_proxy(samples_a: np.ndarray, samples_b: np.ndarray, seed: int = 0) -> float:
    """Fréchet distance between random-conv-feature Gaussians of two image sets."""
    if samples_a.shape[0] < 32 or samples_b.shape[0] < 32:
        raise MetricError("quality proxy needs at least 32 images per set")
    return frechet_distance(embed_images(samples_a, seed), embed_images(samples_b, seed))


def spearman(xs, ys) -> float:
    """Spearman rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 3:
        raise MetricError("spearman needs two equal-length lists with n >= 3")
    from scipy import stats

    rx = stats.rankdata(xs)
    ry = stats.rankdata(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


@dataclass(frozen=True)
class MetricsReport:
    kind: IntrinsicKind
    mean_deg: float | None
    median_deg: float | None
    l1_x100: float | None
    rms: float | None
    delta_125: float | None
    n_pixels: int
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "mean_deg": self.mean_deg,
            "median_deg": self.median_deg,
            "l1_x100": self.l1_x100,
            "rms": self.rms,
            "delta_125": self.delta_125,
            "n_pixels": self.n_pixels,
            "provenance": self.provenance,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


def evaluate_maps(
    preds: list[IntrinsicMap], gts: list[IntrinsicMap], kind: IntrinsicKind, provenance: dict | None = None
) -> MetricsReport:
    """Pool every valid pixel across the evaluation set and compute the
    per-kind statistics of the results tables."""
    if not preds or len(preds) != len(gts):
        raise MetricError("need equally many predictions and ground truths")
    pd = np.concatenate([p.data.reshape(-1, p.data.shape[-1]) for p in preds])
    gd = np.concatenate([g.data.reshape(-1, g.data.shape[-1]) for g in gts])
    mask = np.concatenate([(p.mask & g.mask).ravel() for p, g in zip(preds, gts)])
    pm = IntrinsicMap(kind, pd[:, None, :], mask[:, None])
    gm = IntrinsicMap(kind, gd[:, None, :], mask[:, None])
    n = int(mask.sum())
    mean_deg = median_deg = l1 = rms = delta = None
    if kind is IntrinsicKind.NORMAL:
        mean_deg, median_deg = angular_errors(pm, gm)
        l1 = l1_error_x100(pm, gm)
    elif kind is IntrinsicKind.DEPTH:
        dm = depth_metrics(pm, gm)
        rms, delta = dm.rms, dm.delta_125
    else:
        rms = rms_error(pm, gm)
    return MetricsReport(
        kind=kind,
        mean_deg=mean_deg,
        median_deg=median_deg,
        l1_x100=l1,
        rms=rms,
        delta_125=delta,
        n_pixels=n,
        provenance=provenance or {},
    )


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CorrelationReport:
    rows: list[dict]
    spearman_proxy_error: float

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(
                f, fieldnames=["checkpoint", "pretrain_steps", "quality_proxy", "mean_deg", "is_control"]
            )
            w.writeheader()
            for row in self.rows:
                w.writerow(row)


def correlation_experiment(
    checkpoints: list[tuple[int, str]],
    dataset,
    kind: IntrinsicKind,
    cfg,
    schedule,
    control_checkpoint: str,
    n_proxy_images: int = 64,
    proxy_seed: int = 7,
) -> CorrelationReport:
    """For each pretraining checkpoint (and one random-init control), measure
    the generation-quality proxy and the post-LoRA recovery error under one
    shared training configuration, then correlate the two."""
    if len(checkpoints) < 3:
        raise MetricError("correlation experiment needs at least 3 checkpoints")
    from .backbones.base import load_checkpoint
    from .lora import inject
    from .sampler import sample_images, single_step_predict
    from .training import train_lora_dense

    ref_idx = dataset.split_indices("val")[:n_proxy_images]
    reference = np.stack([dataset.load_rgb(i) for i in ref_idx])
    codec = dataset.manifest.codec_params
    val_idx = dataset.split_indices("val")

    def run_one(backbone) -> tuple[float, float]:
        samples = sample_images(backbone, schedule, n_proxy_images, seed=proxy_seed)
        proxy = quality_proxy(samples, reference, seed=proxy_seed)
        adapters = inject(backbone, cfg.selector, cfg.rank, cfg.seed, kind)
        train_lora_dense(backbone, adapters, dataset, cfg)
        preds, gts = [], []
        from .intrinsics import Image

        for i in val_idx:
            img = Image(data=dataset.load_rgb(i))
            preds.append(single_step_predict(backbone, adapters, img, kind, codec))
            gts.append(dataset.load_intrinsic(i, kind))
        report = evaluate_maps(preds, gts, kind)
        err = report.mean_deg if kind is IntrinsicKind.NORMAL else report.rms
        return proxy, float(err)

    rows = []
    proxies, errors = [], []
    for steps, path in sorted(checkpoints):
        proxy, err = run_one(load_checkpoint(path))
        rows.append(
            {"checkpoint": path, "pretrain_steps": steps, "quality_proxy": proxy, "mean_deg": err, "is_control": 0}
        )
        proxies.append(proxy)
        errors.append(err)

    proxy, err = run_one(load_checkpoint(control_checkpoint))
    rows.append(
        {"checkpoint": control_checkpoint, "pretrain_steps": 0, "quality_proxy": proxy, "mean_deg": err, "is_control": 1}
    )
    return CorrelationReport(rows=rows, spearman_proxy_error=spearman(proxies, errors))
