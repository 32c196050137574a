"""Toy VQ autoencoder: conv encoder, nearest-codebook quantizer, and a decoder
whose single attention block carries the adaptable targets.

Attention projections are 1x1 (token-wise linear) so the low-rank delta rule
applies to plain matrices.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..lora import AdaptableLinear
from .base import GenerativeBackbone


class VQBackbone(GenerativeBackbone):
    family = "vq"

    def __init__(
        self,
        resolution: int = 32,
        channels: int = 64,
        codebook_size: int = 128,
        code_dim: int = 32,
        init_seed: int = 0,
    ):
        super().__init__(
            {
                "resolution": resolution,
                "channels": channels,
                "codebook_size": codebook_size,
                "code_dim": code_dim,
                "init_seed": init_seed,
            }
        )
        torch.manual_seed(init_seed)
        self.resolution = resolution
        self.grid = resolution // 4
        c = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c // 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c // 2, c, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c, code_dim, 3, padding=1),
        )
        self.codebook = nn.Embedding(codebook_size, code_dim)
        nn.init.uniform_(self.codebook.weight, -1.0 / codebook_size, 1.0 / codebook_size)

        self.dec_in = nn.Conv2d(code_dim, c, 3, padding=1)
        self.attn_norm = nn.GroupNorm(8, c)
        self.attn_q = self.register_adaptable("decoder.attn.q", AdaptableLinear(c, c))
        self.attn_k = self.register_adaptable("decoder.attn.k", AdaptableLinear(c, c))
        self.attn_v = self.register_adaptable("decoder.attn.v", AdaptableLinear(c, c))
        self.attn_out = self.register_adaptable("decoder.attn.out", AdaptableLinear(c, c))
        self.dec_mid = nn.Conv2d(c, c, 3, padding=1)
        self.dec_up1 = nn.Conv2d(c, c // 2, 3, padding=1)
        self.dec_up2 = nn.Conv2d(c // 2, c // 2, 3, padding=1)
        self.dec_out = nn.Conv2d(c // 2, 3, 3, padding=1)

    def select_targets(self, selector: str) -> list[str]:
        if selector == "vq_decoder_attn":
            return sorted(self._registry)
        return []

    def encode_codes(self, x: torch.Tensor) -> torch.Tensor:
        """Image -> grid of codebook indices (B, g, g)."""
        z = self.encoder(x)
        b, d, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        dist = torch.cdist(flat, self.codebook.weight)
        return dist.argmin(dim=1).reshape(b, h, w)

    def quantize(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, d, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        dist = torch.cdist(flat, self.codebook.weight)
        idx = dist.argmin(dim=1)
        q = self.codebook(idx).reshape(b, h, w, d).permute(0, 3, 1, 2)
        commit = F.mse_loss(z, q.detach())
        embed = F.mse_loss(q, z.detach())
        q = z + (q - z).detach()  # straight-through
        return q, idx.reshape(b, h, w), commit + embed

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.attn_norm(x).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.attn_q(tokens), self.attn_k(tokens), self.attn_v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * c**-0.5, dim=-1)
        out = self.attn_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        """Code-index grid -> image in model space."""
        q = self.codebook(codes).permute(0, 3, 1, 2)
        return self.decode_latent(q)

    def decode_latent(self, q: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.dec_in(q))
        h = self._attend(h)
        h = F.silu(self.dec_mid(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.dec_up1(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.dec_up2(h))
        return torch.tanh(self.dec_out(h))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        z = self.encoder(x)
        q, codes, vq_loss = self.quantize(z)
        return self.decode_latent(q), codes, vq_loss
