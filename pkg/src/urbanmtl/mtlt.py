"""MTLT binary tensor container.

Layout (little-endian)::

    b"MTLT" | version u8 (=1) | dtype u8 | ndim u8 | ndim x u32 dims | payload

dtype 1 is float32, dtype 2 is uint8. The payload is row-major.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .core import FormatError

MAGIC = b"MTLT"
VERSION = 1
DTYPE_F32 = 1
DTYPE_U8 = 2

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}

PathLike = Union[str, Path]


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code = DTYPE_U8
    elif array.dtype.kind == "f":
        code = DTYPE_F32
    else:
        raise TypeError(f"MTLT stores float32 or uint8 arrays, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'MTLT'", 0)
    if len(buf) < 7:
        raise FormatError("truncated header", len(buf))
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 5)
    offset = 7
    if len(buf) < offset + 4 * ndim:
        raise FormatError("truncated dims", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise FormatError(
            f"payload has {len(buf) - offset} bytes, dims {dims} need {expected}", offset
        )
    out = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(dims)
    return out.astype(dtype.newbyteorder("="), copy=True)


def write(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def read(path: PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
