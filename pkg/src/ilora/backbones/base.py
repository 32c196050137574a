"""Shared backbone machinery: the named adaptable-weight registry,
fingerprinting, and the ILCK checkpoint format.

Checkpoint layout: magic b"ILCK", u32 version, u16 family length + family tag,
u32 config length + config JSON, 32-byte fingerprint, u32 tensor count, then
per tensor a u16 name length + UTF-8 name followed by an embedded NTF record.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..lora import AdaptableLinear
from ..ntf import ntf_bytes, ntf_from_bytes

CHECKPOINT_MAGIC = b"ILCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class GenerativeBackbone(nn.Module):
    """Base class: a generator with a registry of named adaptable weights."""

    family: str = "base"

    def __init__(self, config: dict):
        super().__init__()
        self.config = dict(config)
        self._registry: dict[str, AdaptableLinear] = {}

    def register_adaptable(self, name: str, module: AdaptableLinear) -> AdaptableLinear:
        if name in self._registry:
            raise ValueError(f"duplicate adaptable weight name {name!r}")
        self._registry[name] = module
        return module

    def adaptable_modules(self) -> dict[str, AdaptableLinear]:
        return dict(self._registry)

    def named_weights(self) -> list[tuple[str, int, int]]:
        return [(name, m.d1, m.d2) for name, m in sorted(self._registry.items())]

    def select_targets(self, selector: str) -> list[str]:
        raise NotImplementedError

    def fingerprint(self) -> bytes:
        """sha256 over family, config, weight names/shapes, and base weight bytes."""
        h = hashlib.sha256()
        h.update(self.family.encode())
        h.update(json.dumps(self.config, sort_keys=True).encode())
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(str(tuple(tensor.shape)).encode())
            h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
        return h.digest()

    def weights_hash(self) -> str:
        return self.fingerprint().hex()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)


def save_checkpoint(backbone: GenerativeBackbone, path: str | Path) -> None:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    fam = backbone.family.encode()
    out += struct.pack("<H", len(fam))
    out += fam
    cfg = json.dumps(backbone.config, sort_keys=True).encode()
    out += struct.pack("<I", len(cfg))
    out += cfg
    out += backbone.fingerprint()
    state = backbone.state_dict()
    out += struct.pack("<I", len(state))
    for name in sorted(state):
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        out += ntf_bytes(state[name].detach().cpu().numpy())
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> GenerativeBackbone:
    from .style import StyleBackbone
    from .unet import UNetBackbone
    from .vq import VQBackbone

    families = {"unet": UNetBackbone, "style_gan": StyleBackbone, "vq": VQBackbone}

    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    (flen,) = struct.unpack_from("<H", blob, off)
    off += 2
    family = blob[off : off + flen].decode()
    off += flen
    (clen,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off : off + clen].decode())
    off += clen
    fingerprint = blob[off : off + 32]
    off += 32
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    if family not in families:
        raise CheckpointError(f"{path}: unknown backbone family {family!r}")
    backbone = families[family](**config)
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode()
        off += nlen
        arr, off = ntf_from_bytes(blob, off)
        state[name] = torch.from_numpy(np.ascontiguousarray(arr))
    backbone.load_state_dict(state)
    if backbone.fingerprint() != fingerprint:
        raise CheckpointError(f"{path}: fingerprint mismatch after load")
    return backbone
