"""
IDX binary files (the small-image corpus format).

Layout: 4-byte magic ``00 00 <type> <ndim>``, then ``ndim`` big-endian u32
extents, then the raw payload. Only unsigned-byte payloads (type 0x08) are
read and written here.
"""

from __future__ import annotations

import os
import struct
from typing import Tuple

import numpy as np

from consolidation.core.errors import ConfigError

MAGIC_IMAGES = 0x00000803   # ubyte, 3 dims (N, H, W)
MAGIC_LABELS = 0x00000801   # ubyte, 1 dim (N,)
TYPE_UBYTE = 0x08


class IdxFormatError(ConfigError):
    """Header or payload of an IDX file is not usable."""


def pack_header(magic: int, shape: Tuple[int, ...]) -> bytes:
    ndim = magic & 0xFF
    if ndim != len(shape):
        raise IdxFormatError(f"magic 0x{magic:08x} declares {ndim} dims, shape has {len(shape)}")
    return struct.pack(">I", magic) + struct.pack(f">{ndim}I", *shape)


def unpack_header(blob: bytes, expected_magic: int, path: str = "<bytes>") -> Tuple[Tuple[int, ...], int]:
    """Return (shape, payload offset)."""
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated file ({len(blob)} bytes, no magic)")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if (magic >> 8) & 0xFF != TYPE_UBYTE:
        raise IdxFormatError(f"{path}: unsupported payload type 0x{(magic >> 8) & 0xFF:02x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(blob) < end:
        raise IdxFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", blob[4:end])
    return tuple(int(s) for s in shape), end


def read_idx(path: str, expected_magic: int) -> np.ndarray:
    if not os.path.exists(path):
        raise IdxFormatError(f"IDX file not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    shape, offset = unpack_header(blob, expected_magic, path)
    count = int(np.prod(shape)) if shape else 0
    if len(blob) - offset < count:
        raise IdxFormatError(f"{path}: truncated payload ({len(blob) - offset} of {count} bytes)")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset).reshape(shape)


def write_idx(path: str, array: np.ndarray, magic: int) -> str:
    arr = np.asarray(array)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise IdxFormatError("IDX ubyte payload must lie in [0, 255]")
    arr = arr.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(pack_header(magic, arr.shape))
        f.write(arr.tobytes(order="C"))
    return path
