"""Binary tensor encoding (``.gzt``).

Layout, little-endian: magic ``b"GZTN"``, version u32, rank u32, dims u32 x
rank, dtype code u8, row-major payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptTensorFile

MAGIC = b"GZTN"
VERSION = 1
# code 2 (f64) extends the u8/f32 pair so model parameters round-trip exactly
DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(v).str: k for k, v in DTYPE_CODES.items()}


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _CODE_OF.get(arr.dtype.newbyteorder("<").str)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=DTYPE_CODES[code], order="C")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<B", code)
    return header + arr.tobytes(order="C")


def read_from(stream) -> np.ndarray:
    """Decode one tensor from a binary stream, leaving it positioned after it."""

    def take(n):
        b = stream.read(n)
        if len(b) != n:
            raise CorruptTensorFile("unexpected end of tensor data")
        return b

    if take(4) != MAGIC:
        raise CorruptTensorFile("bad tensor magic")
    version, rank = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CorruptTensorFile(f"unsupported tensor version {version}")
    if rank > 16:
        raise CorruptTensorFile(f"implausible rank {rank}")
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    (code,) = struct.unpack("<B", take(1))
    if code not in DTYPE_CODES:
        raise CorruptTensorFile(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64))
    payload = take(count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def decode(data: bytes) -> np.ndarray:
    stream = io.BytesIO(data)
    arr = read_from(stream)
    if stream.read(1):
        raise CorruptTensorFile("trailing bytes after tensor")
    return arr


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
