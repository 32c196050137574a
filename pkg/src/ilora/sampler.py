"""Single-step dense prediction and the multi-step augmented-input pipeline:
channel extension, v-prediction, zero-terminal-SNR schedules, deterministic
first-order sampling, and classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .backbones.schedule import NoiseSchedule, noise_to, v_target, zero_snr_rescale  # noqa: F401
from .backbones.unet import TASK_TOKENS, UNetBackbone
from .distances import DistanceMetric, TrainConfig, TrainLog, distance, select_budget_indices
from .intrinsics import CodecParams, EncodedTarget, Image, IntrinsicKind, IntrinsicMap, decode_intrinsic, encode_intrinsic
from .lora import AdapterSet


@dataclass(frozen=True)
class CfgParams:
    scale: float = 3.0
    steps: int = 10
    sampler: str = "deterministic_first_order"

    def __post_init__(self):
        if self.scale < 1.0:
            raise ValueError(f"guidance scale must be >= 1, got {self.scale}")
        if self.sampler != "deterministic_first_order":
            raise ValueError(f"unknown sampler {self.sampler!r}")


def dense_forward(backbone: UNetBackbone, x: torch.Tensor, kind_token: int) -> torch.Tensor:
    """One forward pass as a dense predictor: clean input, fixed t = 1."""
    b = x.shape[0]
    t = torch.ones(b, dtype=torch.long)
    tokens = torch.full((b,), kind_token, dtype=torch.long)
    return backbone(x, t, tokens)


def single_step_predict(
    backbone: UNetBackbone,
    adapter_set: AdapterSet | None,
    image: Image,
    kind: IntrinsicKind,
    codec: CodecParams,
) -> IntrinsicMap:
    """Predict one intrinsic map from an RGB image in a single forward pass."""
    if adapter_set is not None and adapter_set.kind != kind:
        raise ValueError(
            f"adapter set was trained for {adapter_set.kind.value}, requested {kind.value}"
        )
    x = torch.from_numpy(image.data).permute(2, 0, 1)[None]
    with torch.no_grad():
        out = dense_forward(backbone, x, TASK_TOKENS[kind.value])
    enc = out[0].permute(1, 2, 0).numpy()
    return decode_intrinsic(EncodedTarget(kind, np.clip(enc, -1, 1), codec))


def extend_input_channels(backbone: UNetBackbone) -> UNetBackbone:
    """Widen the UNet input to 6 channels (noisy + condition image); the new
    weights are a frozen copy of the originals."""
    backbone.attach_condition_branch()
    return backbone


def train_lora_multistep(
    backbone: UNetBackbone,
    adapter_set: AdapterSet,
    dataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    null_prob: float = 0.1,
) -> tuple[AdapterSet, TrainLog]:
    """Denoising LoRA training with the input image concatenated as a frozen
    condition; the task token drops to null with probability `null_prob` so
    classifier-free guidance is available at sampling time."""
    if backbone.conv_cond is None:
        raise ValueError("multi-step training requires a channel-extended backbone")
    if schedule.parameterization != "v" or schedule.alpha_bar[-1] != 0.0:
        raise ValueError("multi-step training expects a zero-SNR v-parameterized schedule")
    codec = dataset.manifest.codec_params
    indices = select_budget_indices(dataset.split_indices("train"), cfg.budget, cfg.seed)
    xs, ys = _load_pairs(dataset, indices, cfg.kind, codec)

    backbone.freeze()
    params = list(adapter_set.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed & 0x7FFFFFFFFFFFFFFF)
    rng = np.random.default_rng([0x3A9, cfg.seed])
    log = TrainLog()
    null_count = 0

    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, xs.shape[0], size=cfg.batch_size)
        x = xs[idx]
        y = ys[idx]
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(y.shape, generator=gen)
        yt = noise_to(y, eps, t, schedule)
        tokens = torch.full((x.shape[0],), TASK_TOKENS[cfg.kind.value], dtype=torch.long)
        dropped = 0
        for b in range(x.shape[0]):
            if rng.random() < null_prob:
                tokens[b] = TASK_TOKENS["null"]
                dropped += 1
        null_count += dropped
        pred = backbone(torch.cat([yt, x], dim=1), torch.full((x.shape[0],), t), tokens)
        loss = F.mse_loss(pred, v_target(y, eps, t, schedule))
        if not torch.isfinite(loss):
            raise RuntimeError(f"multi-step LoRA training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == 1:
            log.log(step, float(loss.detach()), null_dropped=dropped)
    log.extras["null_fraction"] = null_count / (cfg.max_steps * cfg.batch_size)
    return adapter_set, log


def _schedule_path(schedule: NoiseSchedule, steps: int) -> list[int]:
    ts = np.linspace(schedule.T, 1, steps).round().astype(int)
    # de-duplicate while keeping the descending order
    out = []
    for t in ts:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


def _predict_x0_eps(pred_v, x_t, ab):
    x0 = (ab**0.5) * x_t - ((1 - ab) ** 0.5) * pred_v
    eps = ((1 - ab) ** 0.5) * x_t + (ab**0.5) * pred_v
    return x0, eps


def multi_step_sample(
    backbone: UNetBackbone,
    image: Image,
    kind: IntrinsicKind,
    cfg: CfgParams,
    seed: int,
    codec: CodecParams,
    schedule: NoiseSchedule,
    no_condition: bool = False,
) -> IntrinsicMap:
    """Sample an intrinsic map from pure noise, conditioned on the input image
    through the extra input channels, with classifier-free guidance on the
    task token. Deterministic given (inputs, seed)."""
    if backbone.conv_cond is None:
        raise ValueError("multi-step sampling requires a channel-extended backbone")
    cond_img = torch.from_numpy(image.data).permute(2, 0, 1)[None]
    if no_condition:
        cond_img = torch.zeros_like(cond_img)
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    x = torch.randn(cond_img.shape, generator=gen)
    kind_tok = torch.tensor([TASK_TOKENS[kind.value]])
    null_tok = torch.tensor([TASK_TOKENS["null"]])

    path = _schedule_path(schedule, cfg.steps)
    with torch.no_grad():
        for i, t in enumerate(path):
            tt = torch.tensor([t])
            inp = torch.cat([x, cond_img], dim=1)
            pred = backbone(inp, tt, kind_tok)
            if cfg.scale != 1.0:
                null_pred = backbone(inp, tt, null_tok)
                pred = null_pred + cfg.scale * (pred - null_pred)
            ab = float(schedule.alpha_bar[t])
            x0, eps = _predict_x0_eps(pred, x, ab)
            x0 = x0.clamp(-1.5, 1.5)
            if i + 1 < len(path):
                ab_next = float(schedule.alpha_bar[path[i + 1]])
                x = (ab_next**0.5) * x0 + ((1 - ab_next) ** 0.5) * eps
            else:
                x = x0
    enc = x[0].permute(1, 2, 0).numpy()
    return decode_intrinsic(EncodedTarget(kind, np.clip(enc, -1, 1).astype(np.float32), codec))


def sample_images(
    backbone: UNetBackbone,
    schedule: NoiseSchedule,
    n: int,
    seed: int,
    steps: int = 10,
    batch_size: int = 16,
) -> np.ndarray:
    """Generate n RGB images (N, H, W, 3 model space) with the plain deterministic
    sampler and the pretraining "image" token; used by the quality proxy."""
    res = backbone.resolution
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    path = _schedule_path(schedule, steps)
    out = []
    with torch.no_grad():
        done = 0
        while done < n:
            b = min(batch_size, n - done)
            x = torch.randn(b, 3, res, res, generator=gen)
            tok = torch.full((b,), TASK_TOKENS["image"], dtype=torch.long)
            for i, t in enumerate(path):
                tt = torch.full((b,), t)
                pred = backbone(x, tt, tok)
                ab = float(schedule.alpha_bar[t])
                if schedule.parameterization == "v":
                    x0, eps = _predict_x0_eps(pred, x, ab)
                else:
                    eps = pred
                    x0 = (x - ((1 - ab) ** 0.5) * eps) / max(ab, 1e-8) ** 0.5
                x0 = x0.clamp(-1.5, 1.5)
                if i + 1 < len(path):
                    ab_next = float(schedule.alpha_bar[path[i + 1]])
                    x = (ab_next**0.5) * x0 + ((1 - ab_next) ** 0.5) * eps
                else:
                    x = x0
            out.append(x0.clamp(-1, 1).permute(0, 2, 3, 1).numpy())
            done += b
    return np.concatenate(out, axis=0)


def _load_pairs(dataset, indices, kind: IntrinsicKind, codec: CodecParams):
    """(rgb, encoded target) tensors for a list of sample indices."""
    xs, ys = [], []
    for i in indices:
        xs.append(dataset.load_rgb(i))
        enc = encode_intrinsic(dataset.load_intrinsic(i, kind), codec)
        ys.append(enc.data)
    x = torch.from_numpy(np.stack(xs)).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.stack(ys)).permute(0, 3, 1, 2).contiguous()
    return x, y
