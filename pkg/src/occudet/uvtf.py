"""UVTF binary tensor files.

Layout: magic ``UVTF``, version u32, dtype code u8 (0=f32, 1=u16, 2=u8),
ndim u8, dims as u64 array, then the raw little-endian row-major payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UVTF"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<u1")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.uint16): 1,
                  np.dtype(np.uint8): 2}


class UvtfError(ValueError):
    """Malformed or unsupported UVTF file."""


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    dtype = np.dtype(arr.dtype)
    if dtype not in _DTYPE_TO_CODE:
        raise UvtfError(f"unsupported dtype {dtype}; expected f32, u16 or u8")
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<BB", _DTYPE_TO_CODE[dtype], arr.ndim))
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(arr.astype(dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise UvtfError(f"bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise UvtfError(f"unsupported version {version}")
        code, ndim = struct.unpack("<BB", fh.read(2))
        if code not in _CODE_TO_DTYPE:
            raise UvtfError(f"unknown dtype code {code}")
        dims_raw = fh.read(8 * ndim)
        if len(dims_raw) != 8 * ndim:
            raise UvtfError("truncated header")
        dims = np.frombuffer(dims_raw, dtype="<u8").astype(np.int64)
        dtype = _CODE_TO_DTYPE[code]
        count = int(np.prod(dims)) if ndim else 1
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise UvtfError("truncated payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(dims)
