"""Toy diffusion UNet with named attention projections and a task-token
conditioning pathway.

Attention lives at the two lowest resolutions (one self + one cross block in
the deepest down stage, the mid stage, and the matching up stage). Every q/k/v/
out projection is an AdaptableLinear with a stable name like "down.1.self.q",
which is the substrate the adapter injection targets.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..lora import AdaptableLinear
from .base import GenerativeBackbone

# conditioning vocabulary: the pretraining token, the four intrinsics, and the
# classifier-free-guidance null token
TASK_TOKENS = {"image": 0, "normal": 1, "depth": 2, "albedo": 3, "shading": 4, "null": 5}


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, ch_in: int, ch_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, ch_out)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, backbone: GenerativeBackbone, name: str, ch: int, n_tokens: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, ch)
        # learned positional embedding: the rest of the net is translation
        # equivariant, and position-dependent structure (ground depth varies
        # by image row) is unrepresentable without it
        self.pos = nn.Parameter(torch.randn(1, n_tokens, ch) * 0.02)
        self.q = backbone.register_adaptable(f"{name}.q", AdaptableLinear(ch, ch))
        self.k = backbone.register_adaptable(f"{name}.k", AdaptableLinear(ch, ch))
        self.v = backbone.register_adaptable(f"{name}.v", AdaptableLinear(ch, ch))
        self.out = backbone.register_adaptable(f"{name}.out", AdaptableLinear(ch, ch))
        self.scale = ch**-0.5

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2) + self.pos
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class CrossAttention(nn.Module):
    def __init__(self, backbone: GenerativeBackbone, name: str, ch: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, ch)
        self.q = backbone.register_adaptable(f"{name}.q", AdaptableLinear(ch, ch))
        self.k = backbone.register_adaptable(f"{name}.k", AdaptableLinear(cond_dim, ch))
        self.v = backbone.register_adaptable(f"{name}.v", AdaptableLinear(cond_dim, ch))
        self.out = backbone.register_adaptable(f"{name}.out", AdaptableLinear(ch, ch))
        self.scale = ch**-0.5

    def forward(self, x, cond):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.q(tokens), self.k(cond), self.v(cond)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNetBackbone(GenerativeBackbone):
    """Dense image-to-image predictor / denoiser with a 3-channel head."""

    family = "unet"

    def __init__(
        self,
        resolution: int = 48,
        base_channels: int = 32,
        cond_dim: int = 64,
        init_seed: int = 0,
        extended: bool = False,
    ):
        super().__init__(
            {
                "resolution": resolution,
                "base_channels": base_channels,
                "cond_dim": cond_dim,
                "init_seed": init_seed,
                "extended": extended,
            }
        )
        torch.manual_seed(init_seed)
        c0 = base_channels
        c1 = base_channels * 2
        emb = 64
        self.resolution = resolution
        self.emb_dim = emb
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.token_embed = nn.Embedding(len(TASK_TOKENS), cond_dim)

        self.conv_in = nn.Conv2d(3, c0, 3, padding=1, bias=False)
        self.conv_cond = None
        self.down0_res = ResBlock(c0, c0, emb)
        self.down0_pool = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.down1_res = ResBlock(c1, c1, emb)
        self.down1_self = SelfAttention(self, "down.1.self", c1, (resolution // 2) ** 2)
        self.down1_cross = CrossAttention(self, "down.1.cross", c1, cond_dim)
        self.down1_pool = nn.Conv2d(c1, c1, 3, stride=2, padding=1)

        self.mid_res1 = ResBlock(c1, c1, emb)
        self.mid_self = SelfAttention(self, "mid.self", c1, (resolution // 4) ** 2)
        self.mid_cross = CrossAttention(self, "mid.cross", c1, cond_dim)
        self.mid_res2 = ResBlock(c1, c1, emb)

        self.up1_conv = nn.Conv2d(c1 + c1, c1, 3, padding=1)
        self.up1_res = ResBlock(c1, c1, emb)
        self.up1_self = SelfAttention(self, "up.1.self", c1, (resolution // 2) ** 2)
        self.up1_cross = CrossAttention(self, "up.1.cross", c1, cond_dim)
        self.up0_conv = nn.Conv2d(c1 + c0, c0, 3, padding=1)
        self.up0_res = ResBlock(c0, c0, emb)
        self.out_norm = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, 3, 3, padding=1)
        if extended:
            self.attach_condition_branch()

    def attach_condition_branch(self) -> None:
        """Widen the input to 6 channels: the extra branch is a frozen copy of
        conv_in so the condition is processed like an image at init."""
        if self.conv_cond is not None:
            raise ValueError("backbone input already extended to 6 channels")
        conv = nn.Conv2d(3, self.conv_in.out_channels, 3, padding=1, bias=False)
        with torch.no_grad():
            conv.weight.copy_(self.conv_in.weight)
        conv.weight.requires_grad_(False)
        self.conv_cond = conv
        self.config["extended"] = True

    def select_targets(self, selector: str) -> list[str]:
        names = sorted(self._registry)
        table = {
            "all_attn": lambda n: True,
            "cross_only": lambda n: ".cross." in n,
            "self_only": lambda n: ".self." in n,
            "down_blocks": lambda n: n.startswith("down."),
            "mid_block": lambda n: n.startswith("mid."),
            "up_blocks": lambda n: n.startswith("up."),
        }
        if selector not in table:
            return []
        return [n for n in names if table[selector](n)]

    def forward(self, x: torch.Tensor, t: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 6:
            if self.conv_cond is None:
                raise ValueError("6-channel input but backbone is not extended")
            h = self.conv_in(x[:, :3]) + self.conv_cond(x[:, 3:])
        else:
            h = self.conv_in(x)
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim))
        if token_ids.dim() == 1:
            token_ids = token_ids[:, None]
        cond = self.token_embed(token_ids)

        h0 = self.down0_res(h, emb)
        h1 = self.down1_res(self.down0_pool(h0), emb)
        h1 = self.down1_cross(self.down1_self(h1), cond)
        m = self.mid_res1(self.down1_pool(h1), emb)
        m = self.mid_cross(self.mid_self(m), cond)
        m = self.mid_res2(m, emb)

        u1 = F.interpolate(m, scale_factor=2, mode="nearest")
        u1 = self.up1_conv(torch.cat([u1, h1], dim=1))
        u1 = self.up1_res(u1, emb)
        u1 = self.up1_cross(self.up1_self(u1), cond)
        u0 = F.interpolate(u1, scale_factor=2, mode="nearest")
        u0 = self.up0_conv(torch.cat([u0, h0], dim=1))
        u0 = self.up0_res(u0, emb)
        return self.conv_out(F.silu(self.out_norm(u0)))
