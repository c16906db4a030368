"""Binary tensor records: little-endian, rank and extents before payload."""

from __future__ import annotations

import numpy as np

__all__ = ["write_tensor", "read_tensor"]

_DTYPES = {"f8": "<f8", "f4": "<f4"}


def write_tensor(fh, arr):
    """Write one record: u4 rank, u4 extents, raw little-endian values."""
    arr = np.ascontiguousarray(arr)
    fh.write(np.uint32(arr.ndim).tobytes())
    fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
    code = "f4" if arr.dtype == np.float32 else "f8"
    fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_tensor(fh, dtype_code):
    """Read one record written by ``write_tensor``; ``dtype_code`` is f4/f8."""
    if dtype_code not in _DTYPES:
        raise ValueError(f"unknown tensor dtype code {dtype_code!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("truncated tensor record: missing rank")
    rank = int(np.frombuffer(raw, dtype="<u4")[0])
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ValueError("truncated tensor record: missing extents")
    shape = tuple(int(x) for x in np.frombuffer(raw, dtype="<u4"))
    count = int(np.prod(shape)) if shape else 1
    itemsize = 4 if dtype_code == "f4" else 8
    raw = fh.read(count * itemsize)
    if len(raw) != count * itemsize:
        raise ValueError("truncated tensor record: missing payload")
    return np.frombuffer(raw, dtype=_DTYPES[dtype_code]).reshape(shape).copy()
