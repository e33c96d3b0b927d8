"""On-disk tensor container.

Layout (little-endian throughout):

====== ======================================
bytes  field
====== ======================================
0-3    magic ``VDTQ``
4      version (1)
5      dtype code (0 = float64)
6      ndim
7..    ndim unsigned 32-bit dims
..     payload, row-major float64
====== ======================================

Writes and reads are bit-exact round trips.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IOFormatError

MAGIC = b"VDTQ"
VERSION = 1
DTYPE_F64 = 0


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim > 255:
        raise IOFormatError("tensor rank exceeds format limit")
    for dim in arr.shape:
        if dim >= 1 << 32:
            raise IOFormatError("dimension exceeds u32 range")
    header = struct.pack("<4sBBB", MAGIC, VERSION, DTYPE_F64, arr.ndim)
    dims = np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = arr.astype("<f8", copy=False).tobytes()
    Path(path).write_bytes(header + dims + payload)


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 7:
        raise IOFormatError(f"{path}: truncated header")
    magic, version, dtype, ndim = struct.unpack("<4sBBB", blob[:7])
    if magic != MAGIC:
        raise IOFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise IOFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F64:
        raise IOFormatError(f"{path}: unsupported dtype code {dtype}")
    offset = 7 + 4 * ndim
    if len(blob) < offset:
        raise IOFormatError(f"{path}: truncated dims")
    dims = np.frombuffer(blob[7:offset], dtype="<u4").astype(np.int64)
    expect = 8 * int(np.prod(dims))  # empty dims -> scalar, prod = 1
    if len(blob) != offset + expect:
        raise IOFormatError(
            f"{path}: payload is {len(blob) - offset} bytes, expected {expect}")
    data = np.frombuffer(blob[offset:], dtype="<f8")
    return data.reshape(tuple(int(d) for d in dims)).copy()
