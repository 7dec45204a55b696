"""STF1 tensor files.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"STF1"
    offset 4   u32       dtype code: 1 = float64, 2 = float32
    offset 8   u32       ndim
    offset 12  u64 * ndim  dims
    then       payload, row-major, little-endian, prod(dims) * itemsize bytes

The whole file is validated before any array is returned.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"STF1"
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
CODES = {"f64": 1, "f32": 2}


def stf_bytes(t, dtype: str = "f64") -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if dtype not in CODES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    code = CODES[dtype]
    arr = np.asarray(arr, dtype=DTYPES[code], order="C")
    header = MAGIC + struct.pack("<II", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def stf_write(path, t, dtype: str = "f64") -> Path:
    path = Path(path)
    blob = stf_bytes(t, dtype)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def stf_parse(blob: bytes) -> np.ndarray:
    if len(blob) < 12:
        raise FormatError("truncated header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    code, ndim = struct.unpack_from("<II", blob, 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=4)
    dims_end = 12 + 8 * ndim
    if len(blob) < dims_end:
        raise FormatError(f"truncated dims for ndim={ndim}", offset=len(blob))
    dims = struct.unpack_from(f"<{ndim}Q", blob, 12)
    dtype = DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = dims_end + count * dtype.itemsize
    if len(blob) != expected:
        kind = "truncated" if len(blob) < expected else "oversized"
        raise FormatError(f"{kind} payload: expected {expected} bytes, found {len(blob)}", offset=min(len(blob), expected))
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=dims_end).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def stf_read(path, as_tensor: bool = False):
    arr = stf_parse(Path(path).read_bytes())
    return Tensor(arr) if as_tensor else arr
