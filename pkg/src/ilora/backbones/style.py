"""Toy style-based generator: mapping MLP, per-layer style affines (the
adaptable targets), and a stack of modulated convolutions.

There are no per-layer noise inputs, so the image is a pure function of z.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..lora import AdaptableLinear
from .base import GenerativeBackbone


class ModulatedConv(nn.Module):
    """StyleGAN2-style conv: scale input channels by the style, demodulate."""

    def __init__(self, ch_in: int, ch_out: int, kernel: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(ch_out, ch_in, kernel, kernel) * (ch_in * kernel * kernel) ** -0.5)
        self.bias = nn.Parameter(torch.zeros(ch_out))
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, ch_in, h, w = x.shape
        ch_out = self.weight.shape[0]
        # style modulation; +1 so a zero style is the identity scaling
        s = style[:, None, :, None, None] + 1.0
        weight = self.weight[None] * s
        demod = torch.rsqrt((weight**2).sum(dim=(2, 3, 4)) + 1e-8)
        weight = weight * demod[:, :, None, None, None]
        x = x.reshape(1, b * ch_in, h, w)
        weight = weight.reshape(b * ch_out, ch_in, *self.weight.shape[2:])
        out = F.conv2d(x, weight, padding=self.padding, groups=b)
        return out.reshape(b, ch_out, h, w) + self.bias[None, :, None, None]


class StyleBackbone(GenerativeBackbone):
    """z -> w -> per-layer styles -> modulated synthesis stack -> RGB."""

    family = "style_gan"

    def __init__(
        self,
        resolution: int = 32,
        z_dim: int = 64,
        w_dim: int = 64,
        base_channels: int = 64,
        init_seed: int = 0,
    ):
        super().__init__(
            {
                "resolution": resolution,
                "z_dim": z_dim,
                "w_dim": w_dim,
                "base_channels": base_channels,
                "init_seed": init_seed,
            }
        )
        if resolution not in (32, 48):
            raise ValueError("style backbone supports resolution 32 or 48")
        torch.manual_seed(init_seed)
        self.z_dim = z_dim
        self.resolution = resolution
        self.mapping = nn.Sequential(
            nn.Linear(z_dim, w_dim), nn.SiLU(), nn.Linear(w_dim, w_dim)
        )
        base = 4 if resolution == 32 else 6
        n_up = 3
        chans = [base_channels, base_channels, base_channels // 2, base_channels // 2]
        self.const = nn.Parameter(torch.randn(1, chans[0], base, base))
        self.convs = nn.ModuleList()
        self.affines = nn.ModuleList()
        ch_in = chans[0]
        for i in range(n_up + 1):
            ch_out = chans[i]
            self.convs.append(ModulatedConv(ch_in, ch_out))
            self.affines.append(
                self.register_adaptable(f"affine.{i}", AdaptableLinear(w_dim, ch_in))
            )
            ch_in = ch_out
        self.to_rgb = nn.Conv2d(ch_in, 3, 1)

    def select_targets(self, selector: str) -> list[str]:
        if selector == "gan_affine":
            return sorted(self._registry)
        return []

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z / (z.norm(dim=1, keepdim=True) / z.shape[1] ** 0.5 + 1e-8)
        w = self.mapping(z)
        x = self.const.expand(z.shape[0], -1, -1, -1)
        for i, (conv, affine) in enumerate(zip(self.convs, self.affines)):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.silu(conv(x, affine(w)))
        return torch.tanh(self.to_rgb(x))

    def sample_z(self, n: int, seed: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        return torch.randn(n, self.z_dim, generator=gen)
