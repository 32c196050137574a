"""Recovery training: LoRA loops for all three backbone families, plus the
linear-probe and full-fine-tune baselines."""

from __future__ import annotations

import copy
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbones.style import StyleBackbone
from .backbones.unet import TASK_TOKENS, UNetBackbone
from .backbones.vq import VQBackbone
from .distances import DistanceMetric, TrainConfig, TrainLog, distance, select_budget_indices
from .intrinsics import IntrinsicKind, encode_intrinsic
from .lora import AdapterSet
from .sampler import _load_pairs, dense_forward


class BaselineKind(Enum):
    LORA = "lora"
    LINEAR_PROBE = "linear_probe"
    FULL_FINETUNE = "full_finetune"


def train_lora_dense(
    backbone: UNetBackbone,
    adapter_set: AdapterSet,
    dataset,
    cfg: TrainConfig,
) -> tuple[AdapterSet, TrainLog]:
    """Optimize only the adapters with the single-step dense predictor against
    encoded ground-truth targets drawn from the budget subset."""
    codec = dataset.manifest.codec_params
    indices = select_budget_indices(dataset.split_indices("train"), cfg.budget, cfg.seed)
    xs, ys = _load_pairs(dataset, indices, cfg.kind, codec)

    backbone.freeze()
    opt = torch.optim.Adam(list(adapter_set.parameters()), lr=cfg.learning_rate)
    rng = np.random.default_rng([0xDE45E, cfg.seed])
    log = TrainLog()
    token = TASK_TOKENS[cfg.kind.value]
    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, xs.shape[0], size=cfg.batch_size)
        pred = dense_forward(backbone, xs[idx], token)
        loss = distance(cfg.metric, pred.permute(0, 2, 3, 1), ys[idx].permute(0, 2, 3, 1))
        if not torch.isfinite(loss):
            raise RuntimeError(f"LoRA dense training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == 1:
            log.log(step, float(loss.detach()))
    return adapter_set, log


def train_lora_generative(
    backbone: StyleBackbone | VQBackbone,
    adapter_set: AdapterSet,
    oracle,
    cfg: TrainConfig,
    dataset=None,
) -> tuple[AdapterSet, TrainLog]:
    """LoRA training on generated images: the frozen base generator provides
    the RGB, the oracle predictor provides the pseudo ground truth, and the
    adapted generator learns to emit the encoded intrinsic for the same input."""
    if oracle.kind != cfg.kind:
        raise ValueError(f"oracle predicts {oracle.kind.value}, config wants {cfg.kind.value}")
    backbone.freeze()
    opt = torch.optim.Adam(list(adapter_set.parameters()), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed & 0x7FFFFFFFFFFFFFFF)
    log = TrainLog()

    is_vq = isinstance(backbone, VQBackbone)
    if is_vq:
        if dataset is None:
            raise ValueError("the VQ loop needs a dataset to encode images into codes")
        indices = select_budget_indices(dataset.split_indices("train"), cfg.budget, cfg.seed)
        imgs = torch.from_numpy(
            np.stack([dataset.load_rgb(i) for i in indices])
        ).permute(0, 3, 1, 2).contiguous()
        rng = np.random.default_rng([0x6E4, cfg.seed])

    for step in range(1, cfg.max_steps + 1):
        if is_vq:
            idx = rng.integers(0, imgs.shape[0], size=cfg.batch_size)
            with torch.no_grad():
                codes = backbone.encode_codes(imgs[idx])
                base_rgb = _with_adapters_disabled(backbone, lambda: backbone.decode(codes))
            pred = backbone.decode(codes)
        else:
            z = torch.randn(cfg.batch_size, backbone.z_dim, generator=gen)
            with torch.no_grad():
                base_rgb = _with_adapters_disabled(backbone, lambda: backbone(z))
            pred = backbone(z)
        with torch.no_grad():
            target = oracle.predict_encoded(base_rgb)
        loss = distance(cfg.metric, pred.permute(0, 2, 3, 1), target.permute(0, 2, 3, 1))
        if not torch.isfinite(loss):
            raise RuntimeError(f"LoRA generative training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == 1:
            log.log(step, float(loss.detach()))
    return adapter_set, log


def _with_adapters_disabled(backbone, fn):
    mods = backbone.adaptable_modules()
    saved = {n: m.adapter for n, m in mods.items()}
    for m in mods.values():
        m.adapter = None
    try:
        return fn()
    finally:
        for n, m in mods.items():
            m.adapter = saved[n]


class ProbeHead(nn.Module):
    """Per-layer 1x1 linear heads on frozen attention-block outputs, upsampled
    to output resolution and averaged."""

    def __init__(self, layer_dims: dict[str, int]):
        super().__init__()
        self.heads = nn.ModuleDict(
            {name.replace(".", "__"): nn.Linear(dim, 3) for name, dim in layer_dims.items()}
        )

    def forward(self, features: dict[str, torch.Tensor], resolution: int) -> torch.Tensor:
        outs = []
        for name, feat in features.items():
            head = self.heads[name.replace(".", "__")]
            mapped = head(feat.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
            outs.append(F.interpolate(mapped, size=(resolution, resolution), mode="bilinear"))
        return torch.stack(outs).mean(dim=0)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _attention_features(backbone: UNetBackbone, x: torch.Tensor, token: int):
    """Spatial feature map after each attention block (hooked on the out
    projections' parent modules)."""
    feats: dict[str, torch.Tensor] = {}
    hooks = []
    for name, mod in backbone.named_modules():
        if mod.__class__.__name__ in ("SelfAttention", "CrossAttention"):
            hooks.append(mod.register_forward_hook(lambda m, i, o, n=name: feats.__setitem__(n, o)))
    try:
        dense_forward(backbone, x, token)
    finally:
        for h in hooks:
            h.remove()
    return feats


def train_linear_probe(
    backbone: UNetBackbone,
    dataset,
    cfg: TrainConfig,
) -> tuple[ProbeHead, TrainLog]:
    codec = dataset.manifest.codec_params
    indices = select_budget_indices(dataset.split_indices("train"), cfg.budget, cfg.seed)
    xs, ys = _load_pairs(dataset, indices, cfg.kind, codec)
    backbone.freeze()
    token = TASK_TOKENS[cfg.kind.value]
    res = xs.shape[-1]

    with torch.no_grad():
        probe_feats = _attention_features(backbone, xs[:1], token)
    torch.manual_seed(cfg.seed)
    head = ProbeHead({n: f.shape[1] for n, f in probe_feats.items()})
    opt = torch.optim.Adam(head.parameters(), lr=max(cfg.learning_rate, 1e-3))
    rng = np.random.default_rng([0x9B0BE, cfg.seed])
    log = TrainLog()
    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, xs.shape[0], size=cfg.batch_size)
        with torch.no_grad():
            feats = _attention_features(backbone, xs[idx], token)
        pred = head(feats, res)
        loss = distance(cfg.metric, pred.permute(0, 2, 3, 1), ys[idx].permute(0, 2, 3, 1))
        if not torch.isfinite(loss):
            raise RuntimeError(f"linear-probe training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == 1:
            log.log(step, float(loss.detach()))
    return head, log


def probe_predict(backbone: UNetBackbone, head: ProbeHead, x: torch.Tensor, kind: IntrinsicKind):
    with torch.no_grad():
        feats = _attention_features(backbone, x, TASK_TOKENS[kind.value])
        return head(feats, x.shape[-1])


def full_finetune(
    backbone: UNetBackbone,
    dataset,
    cfg: TrainConfig,
) -> tuple[UNetBackbone, TrainLog]:
    """Unfreeze everything and train the same objective on the same budget."""
    codec = dataset.manifest.codec_params
    indices = select_budget_indices(dataset.split_indices("train"), cfg.budget, cfg.seed)
    xs, ys = _load_pairs(dataset, indices, cfg.kind, codec)
    tuned = copy.deepcopy(backbone)
    for p in tuned.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(tuned.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([0xF7, cfg.seed])
    log = TrainLog()
    token = TASK_TOKENS[cfg.kind.value]
    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, xs.shape[0], size=cfg.batch_size)
        pred = dense_forward(tuned, xs[idx], token)
        loss = distance(cfg.metric, pred.permute(0, 2, 3, 1), ys[idx].permute(0, 2, 3, 1))
        if not torch.isfinite(loss):
            raise RuntimeError(f"full fine-tune diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == 1:
            log.log(step, float(loss.detach()))
    return tuned, log
