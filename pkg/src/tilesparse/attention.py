"""Full attention, tile-skipping sparse attention, and FLOPs accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DomainError, InvalidMaskError, ShapeMismatchError
from .tiling import TileLayout, tile

DTYPE = np.float32
# rows of logits materialized at once by full_attention when probs are not requested
_ROW_CHUNK = 512


@dataclass(frozen=True)
class HeadTensors:
    """Per-head ``q, k, v`` matrices, each ``n x d``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("q", "k", "v"):
            a = np.asarray(getattr(self, name), dtype=DTYPE)
            object.__setattr__(self, name, a)
            if a.ndim != 2:
                raise ShapeMismatchError(f"{name} must be a matrix, got shape {a.shape}")
        if not (self.q.shape == self.k.shape and self.k.shape[0] == self.v.shape[0]):
            raise ShapeMismatchError(
                f"inconsistent head shapes q={self.q.shape} k={self.k.shape} v={self.v.shape}"
            )
        if self.q.shape[1] < 1:
            raise ShapeMismatchError("head dim must be >= 1")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d)

    def check_finite(self):
        for name in ("q", "k", "v"):
            if not np.isfinite(getattr(self, name)).all():
                raise DomainError(f"non-finite entries in {name}")

    def tiled(self, layout: TileLayout) -> "TiledHeads":
        return TiledHeads(tile(self.q, layout), tile(self.k, layout), tile(self.v, layout))


@dataclass(frozen=True)
class TiledHeads:
    """Tiled ``q, k, v`` views, each ``n_tiles x b x d``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    @property
    def n_tiles(self) -> int:
        return self.q.shape[0]

    @property
    def b(self) -> int:
        return self.q.shape[1]

    @property
    def d(self) -> int:
        return self.q.shape[2]


@dataclass(frozen=True)
class TileMask:
    """Binary ``n_tiles x n_tiles`` tile-selection mask with exactly ``k`` ones per row."""

    m: np.ndarray
    k: int

    def __post_init__(self):
        m = np.asarray(self.m, dtype=bool)
        object.__setattr__(self, "m", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidMaskError(f"tile mask must be square, got {m.shape}")
        if not 1 <= self.k <= m.shape[1]:
            raise InvalidMaskError(f"budget k={self.k} outside [1, {m.shape[1]}]")
        counts = m.sum(axis=1)
        bad = np.flatnonzero(counts != self.k)
        if bad.size:
            raise InvalidMaskError(
                f"row {bad[0]} selects {counts[bad[0]]} tiles, budget is k={self.k}"
            )

    @property
    def n_tiles(self) -> int:
        return self.m.shape[0]

    @property
    def sparsity(self) -> float:
        return 1.0 - self.k / self.n_tiles

    def indices(self) -> np.ndarray:
        """Selected key-tile indices per row, ascending, shape ``n_tiles x k``."""
        return np.nonzero(self.m)[1].reshape(self.n_tiles, self.k)

    def to_json(self) -> dict:
        return {"n_tiles": self.n_tiles, "k": self.k, "rows": self.indices().tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "TileMask":
        n = int(d["n_tiles"])
        m = np.zeros((n, n), dtype=bool)
        for i, row in enumerate(d["rows"]):
            m[i, row] = True
        return cls(m, int(d["k"]))

    @classmethod
    def from_indices(cls, idx: np.ndarray, n_tiles: int) -> "TileMask":
        idx = np.asarray(idx)
        m = np.zeros((idx.shape[0], n_tiles), dtype=bool)
        np.put_along_axis(m, idx, True, axis=1)
        return cls(m, idx.shape[1])

    @classmethod
    def full(cls, n_tiles: int) -> "TileMask":
        return cls(np.ones((n_tiles, n_tiles), dtype=bool), n_tiles)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis; ``-inf`` entries map to 0."""
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def full_attention(h: HeadTensors, return_probs: bool = False):
    """``softmax(q k^T / sqrt(d)) v``.

    Returns ``(output, probs)``; ``probs`` is the ``n x n`` attention map when
    requested and ``None`` otherwise (rows are then processed in chunks and
    the map is never held in full).
    """
    h.check_finite()
    if return_probs:
        probs = softmax_rows((h.q @ h.k.T) * DTYPE(h.scale))
        return probs @ h.v, probs
    out = np.empty_like(h.v, shape=(h.n, h.v.shape[1]))
    for s in range(0, h.n, _ROW_CHUNK):
        p = softmax_rows((h.q[s:s + _ROW_CHUNK] @ h.k.T) * DTYPE(h.scale))
        out[s:s + _ROW_CHUNK] = p @ h.v
    return out, None


def _check_mask(mask: TileMask, n_tiles: int):
    if mask.n_tiles != n_tiles:
        raise InvalidMaskError(f"mask covers {mask.n_tiles} tiles, tensors have {n_tiles}")


def sparse_attention(ht: TiledHeads, mask: TileMask) -> np.ndarray:
    """Tile-skipping attention: each query tile attends only to its selected key tiles.

    Output has the tiled shape ``n_tiles x b x d_v``.
    """
    _check_mask(mask, ht.n_tiles)
    nt, b, d = ht.q.shape
    idx = mask.indices()
    k_sel = ht.k[idx].reshape(nt, mask.k * b, d)
    v_sel = ht.v[idx].reshape(nt, mask.k * b, ht.v.shape[2])
    logits = np.matmul(ht.q, k_sel.transpose(0, 2, 1)) * ht.q.dtype.type(1.0 / math.sqrt(d))
    return np.matmul(softmax_rows(logits), v_sel)


def token_mask(mask: TileMask, layout: TileLayout) -> np.ndarray:
    """Expand a tile mask to an ``n x n`` boolean token mask in raster order."""
    tt = layout.token_tile
    return mask.m[tt[:, None], tt[None, :]]


def dense_masked_attention(h: HeadTensors, mask: TileMask, layout: TileLayout) -> np.ndarray:
    """Reference for :func:`sparse_attention`: additive ``-inf`` token mask, dense softmax."""
    h.check_finite()
    _check_mask(mask, layout.n_tiles)
    if h.n != layout.shape.n:
        raise ShapeMismatchError(f"head has {h.n} tokens, layout expects {layout.shape.n}")
    logits = (h.q @ h.k.T) * DTYPE(h.scale)
    logits[~token_mask(mask, layout)] = -np.inf
    return softmax_rows(logits) @ h.v


@dataclass(frozen=True)
class FlopsReport:
    full_flops: int
    sparse_flops: int
    n_tiles: int
    k: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.k / self.n_tiles

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.sparse_flops, self.full_flops)


def count_flops(n: int, d: int, n_tiles: int, k: int) -> FlopsReport:
    """Count the two attention matmuls (QK^T and AV) at 2 FLOPs per multiply-add."""
    if min(n, d, n_tiles, k) < 1:
        raise ValueError("count_flops arguments must be positive")
    if n % n_tiles:
        raise ShapeMismatchError(f"n={n} is not a multiple of n_tiles={n_tiles}")
    if k > n_tiles:
        raise ValueError(f"k={k} exceeds n_tiles={n_tiles}")
    b = n // n_tiles
    return FlopsReport(4 * n * n * d, 4 * n * (k * b) * d, n_tiles, k)
