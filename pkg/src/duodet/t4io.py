"""Portable binary tensor records.

A record is the magic bytes ``T4\\0``, four little-endian unsigned 32-bit
extents, then the float64 payload little-endian in row-major order.
Arrays of rank below 4 are stored with their shape right-padded by ones;
callers that need the true rank keep it in their own manifest.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"T4\x00"
_HEADER = struct.Struct("<4I")


def write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 4:
        raise ValueError(f"rank {arr.ndim} exceeds the 4 extents of the format")
    extents = tuple(arr.shape) + (1,) * (4 - arr.ndim)
    fh.write(MAGIC)
    fh.write(_HEADER.pack(*extents))
    fh.write(np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes())


def read_record(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    extents = _HEADER.unpack(fh.read(_HEADER.size))
    count = int(np.prod(extents))
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(extents)


def save(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_record(fh, arr)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_record(fh)
