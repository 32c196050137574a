"""8-bit visualization of images and intrinsic maps (presentation only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from .intrinsics import CodecParams, IntrinsicKind, IntrinsicMap


def intrinsic_to_rgb8(m: IntrinsicMap, codec: CodecParams) -> np.ndarray:
    k = m.kind
    if k is IntrinsicKind.NORMAL:
        vis = (m.data + 1.0) / 2.0
    elif k is IntrinsicKind.DEPTH:
        span = codec.depth_max - codec.depth_min
        vis = np.repeat((m.data - codec.depth_min) / span, 3, axis=2)
    elif k is IntrinsicKind.SHADING:
        vis = np.repeat(m.data / codec.shading_max, 3, axis=2)
    else:
        vis = m.data
    return (np.clip(vis, 0.0, 1.0) * 255).round().astype(np.uint8)


def model_space_to_rgb8(data: np.ndarray) -> np.ndarray:
    return (np.clip((data + 1.0) / 2.0, 0.0, 1.0) * 255).round().astype(np.uint8)


def save_grid(tiles: list[list[np.ndarray]], path: str | Path, pad: int = 2) -> None:
    """Write a rows x cols grid of equally sized H x W x 3 uint8 tiles."""
    rows = len(tiles)
    cols = max(len(r) for r in tiles)
    h, w = tiles[0][0].shape[:2]
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            y = pad + r * (h + pad)
            x = pad + c * (w + pad)
            canvas[y : y + h, x : x + w] = tile
    PilImage.fromarray(canvas).save(path)
