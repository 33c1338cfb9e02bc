"""FCRT binary tensor records.

Layout (little-endian)::

    b"FCRT" | u32 version (=1) | u8 rank | u64 dims[rank] | f64 payload

Records can be concatenated; checkpoints store several in one file and
address them by byte offset.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"FCRT"
VERSION = 1
_HEAD = struct.Struct("<4sIB")


class FormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim > 255:
        raise FormatError("rank too large")
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return _HEAD.pack(MAGIC, VERSION, arr.ndim) + dims + np.ascontiguousarray(arr).tobytes()


def read_record(fh: BinaryIO) -> np.ndarray:
    head = fh.read(_HEAD.size)
    if len(head) != _HEAD.size:
        raise FormatError("truncated header")
    magic, version, rank = _HEAD.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    raw_dims = fh.read(8 * rank)
    if len(raw_dims) != 8 * rank:
        raise FormatError("truncated dims")
    shape = struct.unpack(f"<{rank}Q", raw_dims)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError(f"truncated payload: expected {8 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_record(fh)
