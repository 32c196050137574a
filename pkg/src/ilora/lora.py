"""Low-rank adapters: factors, injection into named backbone weights,
parameter accounting, merge/export, and serialization.

An adapter augments a frozen weight W (d1 x d2) with a trainable delta
W_u @ W_l where W_u is d1 x rank (zero at init, so behavior is unchanged)
and W_l is rank x d2. The forward path computes W a + scale * W_u (W_l a)
without ever materializing the dense product.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .intrinsics import IntrinsicKind

SELECTORS = (
    "all_attn",
    "cross_only",
    "self_only",
    "up_blocks",
    "mid_block",
    "down_blocks",
    "gan_affine",
    "vq_decoder_attn",
)

ADAPTER_MAGIC = b"ILRA"
ADAPTER_VERSION = 1


class LoraError(ValueError):
    pass


class LoraAdapter(nn.Module):
    """One low-rank delta bound to a named d1 x d2 backbone weight."""

    def __init__(self, target_id: str, d1: int, d2: int, rank: int, seed: int, scale: float = 1.0):
        super().__init__()
        if not 1 <= rank <= min(d1, d2):
            raise LoraError(f"rank {rank} out of range for {d1}x{d2} weight {target_id!r}")
        self.target_id = target_id
        self.d1, self.d2, self.rank = d1, d2, rank
        self.scale = scale
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        w_l = torch.randn(rank, d2, generator=gen) / (d2**0.5)
        self.w_u = nn.Parameter(torch.zeros(d1, rank))
        self.w_l = nn.Parameter(w_l)

    @property
    def n_params(self) -> int:
        return self.rank * (self.d1 + self.d2)

    def delta(self, a: torch.Tensor) -> torch.Tensor:
        return F.linear(F.linear(a, self.w_l), self.w_u) * self.scale

    def dense_delta(self) -> torch.Tensor:
        return self.scale * (self.w_u @ self.w_l)


def make_adapter(target_id: str, d1: int, d2: int, rank: int, seed: int) -> LoraAdapter:
    return LoraAdapter(target_id, d1, d2, rank, seed)


def adapted_forward(w: torch.Tensor, adapter: LoraAdapter | None, a: torch.Tensor) -> torch.Tensor:
    """o = W a (+ scale * W_u W_l a). `a` has the input dim last."""
    if a.shape[-1] != w.shape[1]:
        raise LoraError(f"input dim {a.shape[-1]} != weight in-dim {w.shape[1]}")
    out = F.linear(a, w)
    if adapter is not None:
        if adapter.d1 != w.shape[0] or adapter.d2 != w.shape[1]:
            raise LoraError(
                f"adapter {adapter.target_id!r} shape ({adapter.d1}x{adapter.d2}) "
                f"does not match weight {tuple(w.shape)}"
            )
        out = out + adapter.delta(a)
    return out


class AdaptableLinear(nn.Module):
    """Linear layer with a frozen-able base weight and an optional adapter slot."""

    def __init__(self, d2: int, d1: int, bias: bool = True):
        super().__init__()
        self.inner = nn.Linear(d2, d1, bias=bias)
        object.__setattr__(self, "adapter", None)

    def __setattr__(self, name, value):
        # the adapter is deliberately NOT a registered submodule: backbone
        # state_dict / parameters / fingerprint must stay adapter-free
        if name == "adapter":
            object.__setattr__(self, name, value)
        else:
            super().__setattr__(name, value)

    @property
    def d1(self) -> int:
        return self.inner.out_features

    @property
    def d2(self) -> int:
        return self.inner.in_features

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        out = self.inner(a)
        if self.adapter is not None:
            out = out + self.adapter.delta(a)
        return out


@dataclass
class AdapterSet:
    adapters: dict[str, LoraAdapter]
    backbone_fingerprint: bytes
    kind: IntrinsicKind
    selector: str
    consumed: bool = field(default=False)

    def parameters(self):
        for a in self.adapters.values():
            yield from a.parameters()

    @property
    def n_params(self) -> int:
        return sum(a.n_params for a in self.adapters.values())

    def state_bytes(self) -> bytes:
        chunks = []
        for name in sorted(self.adapters):
            a = self.adapters[name]
            chunks.append(a.w_u.detach().numpy().tobytes())
            chunks.append(a.w_l.detach().numpy().tobytes())
        return b"".join(chunks)


def inject(backbone, selector: str, rank: int, seed: int, kind: IntrinsicKind) -> AdapterSet:
    """Attach fresh adapters to every weight matched by `selector`.

    The backbone's forward thereafter routes matched weights through the
    adapted path; base weights stay frozen and untouched.
    """
    if selector not in SELECTORS:
        raise LoraError(f"unknown selector {selector!r}")
    names = backbone.select_targets(selector)
    if not names:
        raise LoraError(f"selector {selector!r} matches no weights on {backbone.family} backbone")
    modules = backbone.adaptable_modules()
    adapters: dict[str, LoraAdapter] = {}
    for i, name in enumerate(sorted(names)):
        mod = modules[name]
        adapter = make_adapter(name, mod.d1, mod.d2, rank, seed + i)
        mod.adapter = adapter
        adapters[name] = adapter
    return AdapterSet(
        adapters=adapters,
        backbone_fingerprint=backbone.fingerprint(),
        kind=kind,
        selector=selector,
    )


def detach_adapters(backbone) -> None:
    for mod in backbone.adaptable_modules().values():
        mod.adapter = None


def attach_adapters(backbone, adapter_set: AdapterSet) -> None:
    if adapter_set.backbone_fingerprint != backbone.fingerprint():
        raise LoraError("adapter set fingerprint does not match backbone")
    modules = backbone.adaptable_modules()
    for name, adapter in adapter_set.adapters.items():
        modules[name].adapter = adapter


def param_fraction(adapter_set: AdapterSet, backbone) -> float:
    total = sum(p.numel() for p in backbone.parameters())
    return adapter_set.n_params / total


def format_param_fraction(n_params: int, total_params: int) -> str:
    """Adapter share of the full model as a percent string, e.g. "0.17%"."""
    return f"{100.0 * n_params / total_params:.2f}%"


def merge(adapter_set: AdapterSet, backbone):
    """Bake the deltas into a copy of the backbone; consumes the set."""
    if adapter_set.consumed:
        raise LoraError("adapter set already merged")
    if adapter_set.backbone_fingerprint != backbone.fingerprint():
        raise LoraError("fingerprint mismatch between adapter set and backbone")
    merged = copy.deepcopy(backbone)
    detach_adapters(merged)
    modules = merged.adaptable_modules()
    with torch.no_grad():
        for name, adapter in adapter_set.adapters.items():
            modules[name].inner.weight += adapter.dense_delta()
    adapter_set.consumed = True
    return merged


def save_adapters(adapter_set: AdapterSet, path: str | Path) -> None:
    out = bytearray()
    out += ADAPTER_MAGIC
    out += struct.pack("<I", ADAPTER_VERSION)
    out += adapter_set.backbone_fingerprint
    out += struct.pack("<B", len(adapter_set.kind.value))
    out += adapter_set.kind.value.encode()
    out += struct.pack("<B", len(adapter_set.selector))
    out += adapter_set.selector.encode()
    out += struct.pack("<I", len(adapter_set.adapters))
    for name in sorted(adapter_set.adapters):
        a = adapter_set.adapters[name]
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<IIIf", a.d1, a.d2, a.rank, a.scale)
        out += a.w_l.detach().numpy().astype("<f4").tobytes()
        out += a.w_u.detach().numpy().astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_adapters(path: str | Path, backbone=None) -> AdapterSet:
    """Load an adapter set; verifies the fingerprint when a backbone is given."""
    blob = Path(path).read_bytes()
    if len(blob) < 40:
        raise LoraError(f"{path}: truncated adapter file")
    try:
        if blob[:4] != ADAPTER_MAGIC:
            raise LoraError(f"{path}: not an adapter file")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != ADAPTER_VERSION:
            raise LoraError(f"{path}: unsupported version {version}")
        fingerprint = blob[8:40]
        off = 40
        (klen,) = struct.unpack_from("<B", blob, off)
        off += 1
        kind = IntrinsicKind(blob[off : off + klen].decode())
        off += klen
        (slen,) = struct.unpack_from("<B", blob, off)
        off += 1
        selector = blob[off : off + slen].decode()
        off += slen
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        adapters: dict[str, LoraAdapter] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode()
            off += nlen
            d1, d2, rank, scale = struct.unpack_from("<IIIf", blob, off)
            off += 16
            n_l, n_u = rank * d2 * 4, d1 * rank * 4
            if off + n_l + n_u > len(blob):
                raise LoraError(f"{path}: truncated adapter payload for {name!r}")
            w_l = torch.frombuffer(bytearray(blob[off : off + n_l]), dtype=torch.float32)
            off += n_l
            w_u = torch.frombuffer(bytearray(blob[off : off + n_u]), dtype=torch.float32)
            off += n_u
            adapter = LoraAdapter(name, d1, d2, rank, seed=0, scale=scale)
            with torch.no_grad():
                adapter.w_l.copy_(w_l.reshape(rank, d2))
                adapter.w_u.copy_(w_u.reshape(d1, rank))
            adapters[name] = adapter
        if off != len(blob):
            raise LoraError(f"{path}: trailing bytes after adapter table")
    except LoraError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise LoraError(f"{path}: truncated or corrupt adapter file") from e
    loaded = AdapterSet(adapters, fingerprint, kind, selector)
    if backbone is not None:
        bf = backbone.fingerprint()
        if bf != fingerprint:
            raise LoraError(
                f"fingerprint mismatch: file {fingerprint.hex()} vs backbone {bf.hex()}"
            )
        attach_adapters(backbone, loaded)
    return loaded
