"""VTEN binary tensor files.

Layout, all little-endian::

    b"VTEN"            magic
    u32  version       (1)
    u32  rank
    u64  dims[rank]
    u32  dtype code    (1 = float32; the only supported dtype)
    payload            row-major, prod(dims) * 4 bytes
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import TileSparseError
from .fileutil import atomic_write_bytes

MAGIC = b"VTEN"
VERSION = 1
DTYPE_F32 = 1


class TensorFileError(TileSparseError, ValueError):
    code = 1


class BadMagicError(TensorFileError):
    code = 2


class TruncatedPayloadError(TensorFileError):
    code = 3


class UnsupportedDtypeError(TensorFileError):
    code = 4


class UnsupportedVersionError(TensorFileError):
    code = 5


def encode_tensor(x) -> bytes:
    x = np.asarray(x)
    if x.dtype != np.float32:
        raise UnsupportedDtypeError(f"only float32 tensors can be written, got {x.dtype}")
    head = MAGIC + struct.pack("<II", VERSION, x.ndim) + struct.pack(f"<{x.ndim}Q", *x.shape)
    return head + struct.pack("<I", DTYPE_F32) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise TruncatedPayloadError(f"file holds {len(data)} bytes, shorter than the fixed header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported VTEN version {version}")
    off = 12
    if len(data) < off + 8 * rank + 4:
        raise TruncatedPayloadError("file ends inside the dims/dtype header")
    dims = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    (dtype,) = struct.unpack_from("<I", data, off)
    off += 4
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"unsupported dtype code {dtype}")
    count = int(np.prod(dims, dtype=np.uint64)) if rank else 1
    if len(data) - off != 4 * count:
        raise TruncatedPayloadError(
            f"payload is {len(data) - off} bytes, dims {tuple(dims)} need {4 * count}"
        )
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def write_tensor(path, x):
    atomic_write_bytes(path, encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())
