"""Domain types for intrinsic images and the codec into the generator's RGB head.

Every intrinsic kind is squeezed into the model's 3-channel [-1, 1] output
space so a single output head serves images and intrinsics alike:

  normals  -- already unit vectors in [-1, 1]^3, passed through
  depth    -- affine [depth_min, depth_max] -> [-1, 1], replicated to 3 channels
  shading  -- affine [0, shading_max] -> [-1, 1], replicated
  albedo   -- affine [0, 1] -> [-1, 1]

Decoding inverts the affine (averaging the replicated channels first) and
renormalizes normals to unit length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class IntrinsicKind(Enum):
    NORMAL = "normal"
    DEPTH = "depth"
    ALBEDO = "albedo"
    SHADING = "shading"

    @property
    def channels(self) -> int:
        return 3 if self in (IntrinsicKind.NORMAL, IntrinsicKind.ALBEDO) else 1


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class CodecParams:
    depth_min: float
    depth_max: float
    shading_max: float

    def __post_init__(self):
        if not (self.depth_min < self.depth_max):
            raise CodecError(f"depth_min {self.depth_min} must be < depth_max {self.depth_max}")
        if self.shading_max <= 0:
            raise CodecError(f"shading_max must be > 0, got {self.shading_max}")


@dataclass(frozen=True)
class Image:
    """H x W x 3 float field with an explicit value range (model space [-1, 1])."""

    data: np.ndarray
    value_range: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.value_range
        if not lo < hi:
            raise ValueError(f"bad value range [{lo}, {hi}]")
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"expected H x W x 3, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("image contains non-finite entries")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def to_unit(self) -> np.ndarray:
        """Map to [0, 1] regardless of the stored range."""
        lo, hi = self.value_range
        return np.clip((self.data - lo) / (hi - lo), 0.0, 1.0)


@dataclass(frozen=True)
class IntrinsicMap:
    kind: IntrinsicKind
    data: np.ndarray
    mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        h, w = self.data.shape[:2]
        if self.data.ndim != 3 or self.data.shape[2] != self.kind.channels:
            raise ValueError(
                f"{self.kind.value} map must be H x W x {self.kind.channels}, got {self.data.shape}"
            )
        if self.mask is None:
            object.__setattr__(self, "mask", np.ones((h, w), dtype=bool))
        if self.mask.shape != (h, w):
            raise ValueError(f"mask shape {self.mask.shape} != {(h, w)}")

    def validate(self) -> None:
        """Check the per-kind physical invariants on valid pixels."""
        valid = self.data[self.mask]
        if not np.isfinite(valid).all():
            raise ValueError(f"{self.kind.value} map has non-finite valid entries")
        if self.kind is IntrinsicKind.NORMAL:
            norms = np.linalg.norm(valid, axis=-1)
            if norms.size and (np.abs(norms - 1.0) > 1e-4).any():
                raise ValueError("normals are not unit length within 1e-4")
        elif self.kind is IntrinsicKind.DEPTH:
            if valid.size and (valid <= 0).any():
                raise ValueError("depth must be strictly positive")
        elif self.kind is IntrinsicKind.ALBEDO:
            if valid.size and ((valid < 0) | (valid > 1)).any():
                raise ValueError("albedo outside [0, 1]")
        elif self.kind is IntrinsicKind.SHADING:
            if valid.size and (valid < 0).any():
                raise ValueError("shading must be >= 0")


@dataclass(frozen=True)
class EncodedTarget:
    kind: IntrinsicKind
    data: np.ndarray  # H x W x 3 in [-1, 1]
    codec_params: CodecParams

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"encoded target must be H x W x 3, got {self.data.shape}")


def _affine_to_model(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # double precision keeps encode(decode(encode(m))) bit-stable after the
    # final float32 rounding
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * 2.0 - 1.0


def _affine_from_model(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (x + 1.0) / 2.0 * (hi - lo) + lo


def encode_intrinsic(m: IntrinsicMap, params: CodecParams) -> EncodedTarget:
    """Map a physical intrinsic into the 3-channel [-1, 1] model space.

    Out-of-range inputs are clamped; invalid-mask pixels encode to 0.
    """
    if not np.isfinite(m.data).all():
        raise CodecError(f"{m.kind.value} map contains non-finite entries")
    k = m.kind
    if k is IntrinsicKind.NORMAL:
        enc = m.data
    elif k is IntrinsicKind.DEPTH:
        enc = np.repeat(_affine_to_model(m.data, params.depth_min, params.depth_max), 3, axis=2)
    elif k is IntrinsicKind.SHADING:
        enc = np.repeat(_affine_to_model(m.data, 0.0, params.shading_max), 3, axis=2)
    elif k is IntrinsicKind.ALBEDO:
        enc = _affine_to_model(m.data, 0.0, 1.0)
    else:  # pragma: no cover - enum is closed
        raise CodecError(f"unknown kind {k}")
    enc = np.clip(np.asarray(enc, dtype=np.float64), -1.0, 1.0).astype(np.float32)
    enc = np.where(m.mask[:, :, None], enc, np.float32(0.0))
    return EncodedTarget(kind=k, data=enc, codec_params=params)


def decode_intrinsic(enc: EncodedTarget, mask: np.ndarray | None = None) -> IntrinsicMap:
    """Inverse of :func:`encode_intrinsic` (on valid pixels)."""
    if not np.isfinite(enc.data).all():
        raise CodecError("encoded target contains non-finite entries")
    p = enc.codec_params
    k = enc.kind
    data = np.clip(enc.data.astype(np.float64), -1.0, 1.0)
    if k is IntrinsicKind.NORMAL:
        norms = np.linalg.norm(data, axis=2, keepdims=True)
        fallback = np.array([0.0, 0.0, 1.0], dtype=data.dtype)
        out = np.where(norms < 1e-6, fallback, data / np.maximum(norms, 1e-6))
    else:
        mean = data.mean(axis=2, keepdims=True)
        if k is IntrinsicKind.DEPTH:
            out = _affine_from_model(mean, p.depth_min, p.depth_max)
            out = np.maximum(out, 1e-6)
        elif k is IntrinsicKind.SHADING:
            out = np.maximum(_affine_from_model(mean, 0.0, p.shading_max), 0.0)
        else:
            out = np.clip(_affine_from_model(data, 0.0, 1.0), 0.0, 1.0)
    # decoded values stay in double precision so re-encoding is exact
    return IntrinsicMap(kind=k, data=np.ascontiguousarray(out), mask=mask)
