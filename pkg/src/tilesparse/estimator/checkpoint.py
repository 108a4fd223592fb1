"""Versioned binary checkpoint for estimator parameters.

Layout (little-endian): ``b"VEDA"``, then u32 fields ``version, n_heads,
d_in, d_hidden, d_latent, pool mode code``, then float32 arrays in the order
head 0 ``q.w1 q.b1 q.w2 q.b2 k.w1 k.b1 k.w2 k.b2``, head 1, ...
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import TileSparseError
from ..fileutil import atomic_write_bytes
from .model import MLP, EstimatorParams, HeadParams
from .pooling import POOL_MODES, descriptor_width

MAGIC = b"VEDA"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


class CheckpointError(TileSparseError, ValueError):
    pass


def _shapes(d_in, d_hidden, d_latent):
    return [(d_in, d_hidden), (d_hidden,), (d_hidden, d_latent), (d_latent,)]


def dumps(params: EstimatorParams) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, params.n_heads, params.d_in, params.d_hidden,
                          params.d_latent, POOL_MODES.index(params.mode))
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    return header + body


def loads(data: bytes) -> EstimatorParams:
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated inside header")
    magic, version, n_heads, d_in, d_hidden, d_latent, mode_code = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if mode_code >= len(POOL_MODES):
        raise CheckpointError(f"unknown pool mode code {mode_code}")
    mode = POOL_MODES[mode_code]
    width = descriptor_width(mode, 1)
    if d_in % width:
        raise CheckpointError(f"d_in={d_in} inconsistent with pool mode {mode}")
    shapes = _shapes(d_in, d_hidden, d_latent)
    expected = _HEADER.size + 4 * n_heads * 2 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != expected:
        raise CheckpointError(f"checkpoint has {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    heads = []
    for _ in range(n_heads):
        sides = []
        for _side in range(2):
            arrs = []
            for s in shapes:
                count = int(np.prod(s))
                arrs.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(s).astype(np.float32))
                off += 4 * count
            sides.append(MLP(*arrs))
        heads.append(HeadParams(*sides))
    return EstimatorParams(heads, mode, d_in // width)


def save(path, params: EstimatorParams):
    atomic_write_bytes(path, dumps(params))


def load(path) -> EstimatorParams:
    with open(path, "rb") as f:
        return loads(f.read())
