"""NTF: a tiny bit-exact tensor file format.

Layout: magic b"NTF1", u8 dtype code (1 = little-endian float32, 2 = uint8),
u8 rank, rank * u32 little-endian dims, then the raw row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTF1"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR_DTYPE = {np.dtype("<f4"): 1, np.dtype("u1"): 2}


class NtfError(ValueError):
    pass


def write_ntf(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype == np.bool_:
        array = array.astype("u1")
    elif array.dtype in (np.float64, np.float32):
        array = array.astype("<f4")
    code = _CODE_FOR_DTYPE.get(array.dtype)
    if code is None:
        raise NtfError(f"unsupported dtype {array.dtype} (use float32 or uint8)")
    if array.ndim > 255:
        raise NtfError("rank exceeds u8")
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(array.tobytes())


def read_ntf(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise NtfError(f"{path}: bad magic {blob[:4]!r}")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPE_CODES:
        raise NtfError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", blob, 6)
    dtype = _DTYPE_CODES[code]
    offset = 6 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + n * dtype.itemsize
    if len(blob) != expected:
        raise NtfError(f"{path}: payload size {len(blob)} != expected {expected}")
    return np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(dims).copy()


def ntf_bytes(array: np.ndarray) -> bytes:
    """Serialize to the NTF payload encoding (used inside checkpoint files)."""
    array = np.ascontiguousarray(array)
    if array.dtype == np.bool_:
        array = array.astype("u1")
    elif array.dtype in (np.float64, np.float32):
        array = array.astype("<f4")
    code = _CODE_FOR_DTYPE[array.dtype]
    out = MAGIC + struct.pack("<BB", code, array.ndim)
    out += struct.pack(f"<{array.ndim}I", *array.shape)
    return out + array.tobytes()


def ntf_from_bytes(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one NTF record from a byte buffer; returns (array, next_offset)."""
    if blob[offset : offset + 4] != MAGIC:
        raise NtfError("bad magic in embedded NTF record")
    code, rank = struct.unpack_from("<BB", blob, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", blob, offset + 6)
    dtype = _DTYPE_CODES[code]
    start = offset + 6 + 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + n * dtype.itemsize
    if end > len(blob):
        raise NtfError("truncated embedded NTF record")
    arr = np.frombuffer(blob, dtype=dtype, count=n, offset=start).reshape(dims).copy()
    return arr, end
