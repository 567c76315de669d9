"""Binary tensor files and checksum helpers shared by datasets and checkpoints.

Tensor file layout (little-endian):
    magic "DVGTTEN1" | u8 dtype (0=f32, 1=f64) | u8 rank | rank * u64 dims |
    row-major payload
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DVGTTEN1"
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Corrupt or mismatched on-disk data."""


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}; expected float32/float64")
    if arr.ndim > 255:
        raise FormatError("rank exceeds u8")
    header = MAGIC + struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 2:
        raise FormatError(f"{path}: truncated header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    code, rank = struct.unpack_from("<BB", raw, len(MAGIC))
    if code not in _CODE_DTYPE:
        raise FormatError(f"{path}: unknown dtype code {code}")
    off = len(MAGIC) + 2
    if len(raw) < off + 8 * rank:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    dtype = _CODE_DTYPE[code]
    count = int(np.prod(dims)) if rank else 1
    expected = off + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: payload size {len(raw) - off}, expected {expected - off}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
