"""Pretraining loops for the three toy backbone families.

Each loop is deterministic given its seed and can emit intermediate
checkpoints (used by the generation-quality vs recovery-error experiment).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..dataset import Dataset
from .base import save_checkpoint
from .schedule import NoiseSchedule, noise_to, v_target
from .style import StyleBackbone
from .unet import TASK_TOKENS, UNetBackbone
from .vq import VQBackbone


class DivergenceError(RuntimeError):
    pass


def load_split_images(dataset: Dataset, split: str) -> torch.Tensor:
    """All RGB images of a split as one (N, 3, H, W) tensor in model space."""
    idx = dataset.split_indices(split)
    imgs = np.stack([dataset.load_rgb(i) for i in idx])
    return torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()


def _batches(n: int, batch_size: int, steps: int, seed: int):
    rng = np.random.default_rng([0xBA7C4, seed])
    for _ in range(steps):
        yield rng.integers(0, n, size=batch_size)


def pretrain_diffusion(
    dataset: Dataset,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
    out_dir: str | Path,
    checkpoint_steps: tuple[int, ...] = (),
    batch_size: int = 8,
    lr: float = 2e-4,
    base_channels: int = 32,
) -> dict:
    """Denoising pretraining of the UNet on renderer RGB images, conditioned on
    the fixed "image" token. Emits a checkpoint at each requested step count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = load_split_images(dataset, "train")
    if images.shape[0] < 500:
        raise ValueError(f"diffusion pretraining needs >= 500 train images, got {images.shape[0]}")

    backbone = UNetBackbone(
        resolution=dataset.manifest.resolution, base_channels=base_channels, init_seed=seed
    )
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    token = torch.full((batch_size,), TASK_TOKENS["image"], dtype=torch.long)

    checkpoints: dict[int, str] = {}
    losses = []
    for step, idx in enumerate(_batches(images.shape[0], batch_size, steps, seed), start=1):
        x0 = images[idx]
        t = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        eps = torch.randn(x0.shape, generator=gen)
        xt = noise_to(x0, eps, t, schedule)
        target = v_target(x0, eps, t, schedule) if schedule.parameterization == "v" else eps
        pred = backbone(xt, torch.full((x0.shape[0],), t), token[: x0.shape[0]])
        loss = F.mse_loss(pred, target)
        if not torch.isfinite(loss):
            raise DivergenceError(f"diffusion pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == 1:
            losses.append({"step": step, "loss": float(loss.detach())})
        if step in checkpoint_steps:
            path = out / f"diffusion_{step:07d}.ilck"
            save_checkpoint(backbone, path)
            checkpoints[step] = str(path)

    final = out / f"diffusion_{steps:07d}.ilck"
    save_checkpoint(backbone, final)
    checkpoints[steps] = str(final)
    (out / "diffusion_log.json").write_text(json.dumps({"final_loss": losses[-1]["loss"], "losses": losses}))
    return {"checkpoints": checkpoints, "final": str(final), "final_loss": losses[-1]["loss"], "losses": losses}


class _Discriminator(nn.Module):
    def __init__(self, resolution: int, ch: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ch, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch * 2, ch * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(ch * 2 * (resolution // 8) ** 2, 1),
        )

    def forward(self, x):
        return self.net(x)


def pretrain_gan(
    dataset: Dataset,
    steps: int,
    seed: int,
    out_dir: str | Path,
    checkpoint_steps: tuple[int, ...] = (),
    batch_size: int = 16,
    lr: float = 2e-4,
) -> dict:
    """Non-saturating GAN training of the style backbone; best effort, with
    divergence detection that aborts to the last good checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = load_split_images(dataset, "train")
    res = dataset.manifest.resolution

    torch.manual_seed(seed)
    gen_net = StyleBackbone(resolution=res, init_seed=seed)
    disc = _Discriminator(res)
    opt_g = torch.optim.Adam(gen_net.parameters(), lr=lr, betas=(0.5, 0.99))
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr, betas=(0.5, 0.99))
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)

    checkpoints: dict[int, str] = {}
    losses = []
    bad_streak = 0
    last_good = None
    for step, idx in enumerate(_batches(images.shape[0], batch_size, steps, seed), start=1):
        real = images[idx]
        z = torch.randn(batch_size, gen_net.z_dim, generator=gen)
        fake = gen_net(z)

        d_real = disc(real)
        d_fake = disc(fake.detach())
        loss_d = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        loss_g = F.softplus(-disc(fake)).mean()
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
            raise DivergenceError(f"GAN training produced non-finite loss at step {step}")
        bad_streak = bad_streak + 1 if (float(loss_d.detach()) < 1e-3 and float(loss_g.detach()) > 15.0) else 0
        if bad_streak >= 1000:
            break  # sustained collapse; keep the last good checkpoint
        if step % 50 == 0 or step == 1:
            losses.append({"step": step, "loss_g": float(loss_g.detach()), "loss_d": float(loss_d.detach())})
        if step in checkpoint_steps:
            path = out / f"gan_{step:07d}.ilck"
            save_checkpoint(gen_net, path)
            checkpoints[step] = str(path)
            last_good = str(path)

    final = out / f"gan_{steps:07d}.ilck"
    save_checkpoint(gen_net, final)
    checkpoints[steps] = str(final)
    (out / "gan_log.json").write_text(json.dumps(losses))
    return {
        "checkpoints": checkpoints,
        "final": str(final),
        "last_good": last_good or str(final),
        "losses": losses,
    }


def pretrain_vq(
    dataset: Dataset,
    steps: int,
    seed: int,
    out_dir: str | Path,
    batch_size: int = 16,
    lr: float = 2e-4,
    commitment_weight: float = 0.25,
) -> dict:
    """Reconstruction + codebook commitment training of the VQ autoencoder."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = load_split_images(dataset, "train")
    res = dataset.manifest.resolution

    backbone = VQBackbone(resolution=res, init_seed=seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)

    warnings = []
    for step, idx in enumerate(_batches(images.shape[0], batch_size, steps, seed), start=1):
        x = images[idx]
        recon, codes, vq_loss = backbone(x)
        loss = F.mse_loss(recon, x) + commitment_weight * vq_loss
        if not torch.isfinite(loss):
            raise DivergenceError(f"VQ training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        val = load_split_images(dataset, "val")
        recon, codes, _ = backbone(val)
        mse = float(F.mse_loss(recon, val))
        psnr = 10.0 * np.log10(4.0 / max(mse, 1e-12))  # model-space range is 2
        used = len(torch.unique(backbone.encode_codes(val)))
        k = backbone.config["codebook_size"]
        if used < k * 0.1:
            warnings.append(f"codebook collapse: only {used}/{k} codes in use on val split")

    final = out / f"vq_{steps:07d}.ilck"
    save_checkpoint(backbone, final)
    (out / "vq_log.json").write_text(json.dumps({"val_psnr": psnr, "warnings": warnings}))
    return {"final": str(final), "val_psnr": psnr, "warnings": warnings}
