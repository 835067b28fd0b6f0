"""Raw tensor files: little-endian u64 rank, u32 dims, float32 payload."""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(np.uint64(a.ndim).tobytes())
        f.write(np.asarray(a.shape, dtype="<u4").tobytes())
        f.write(a.astype("<f4").tobytes())


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataError(f"{path}: tensor header needs 8 bytes, file has {len(raw)}")
    rank = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    if rank > 32:
        raise DataError(f"{path}: implausible tensor rank {rank}")
    head = 8 + 4 * rank
    if len(raw) < head:
        raise DataError(f"{path}: truncated dims, need {head} bytes, have {len(raw)}")
    shape = tuple(int(d) for d in np.frombuffer(raw[8:head], dtype="<u4"))
    count = 1
    for d in shape:
        count *= d
    need = head + 4 * count
    if len(raw) != need:
        raise DataError(f"{path}: payload must be {need} bytes, file has {len(raw)}")
    return np.frombuffer(raw[head:], dtype="<f4").reshape(shape).copy()
