"""Supervision targets derived from full attention.

Tile scores are ``n_tiles x n_tiles`` float arrays; entry ``(i, j)`` pools the
full-attention probabilities of the ``b x b`` block between query tile ``i``
and key tile ``j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import DTYPE, HeadTensors, TileMask, softmax_rows
from .errors import DegenerateRowError, DomainError, InvalidMaskError, MemoryBudgetError
from .rng import make_rng
from .tiling import TileLayout, tile

# n*n probability entries allowed before the dense path refuses to run
DENSE_MAX_ELEMENTS = 1 << 26


@dataclass(frozen=True)
class QueryRowSubset:
    indices: np.ndarray
    fraction: float
    seed: int

    def __len__(self):
        return int(self.indices.size)


def round_half_up(x: float) -> int:
    # tolerance absorbs binary representation error, e.g. (1 - 0.9) * 40
    return int(math.floor(x + 0.5 + 1e-9))


def sample_query_rows(n_tiles: int, fraction: float, seed: int) -> QueryRowSubset:
    """Uniform sample of query tiles without replacement, sorted; at least one row."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = min(n_tiles, max(1, round_half_up(fraction * n_tiles)))
    if count == n_tiles:
        idx = np.arange(n_tiles)
    else:
        idx = np.sort(make_rng(seed, 0x51).choice(n_tiles, size=count, replace=False))
    return QueryRowSubset(idx, fraction, seed)


def _block_pool(probs_tiled: np.ndarray, layout: TileLayout, pool: str) -> np.ndarray:
    """Pool an attention map whose rows and columns are already in tiled order."""
    nt, b = layout.n_tiles, layout.b
    p = probs_tiled.reshape(nt, b, nt, b)
    if pool == "max":
        return p.max(axis=(1, 3))
    if pool == "avg":
        return p.mean(axis=(1, 3), dtype=np.float64).astype(DTYPE)
    raise ValueError(f"unknown pool {pool!r}")


def target_scores_dense(
    h: HeadTensors,
    layout: TileLayout,
    probs: np.ndarray | None = None,
    pool: str = "max",
    max_elements: int = DENSE_MAX_ELEMENTS,
) -> np.ndarray:
    """Block-pooled full-attention probabilities, materializing the ``n x n`` map.

    ``probs`` may be passed to reuse an already computed attention map.
    ``pool="avg"`` is the average-pooling baseline target.
    """
    if probs is None:
        if h.n * h.n > max_elements:
            raise MemoryBudgetError(
                f"dense target needs {h.n * h.n} probabilities (budget {max_elements}); "
                "use target_scores_streaming"
            )
        h.check_finite()
        q = h.q[layout.perm]
        k = h.k[layout.perm]
        return _block_pool(softmax_rows((q @ k.T) * DTYPE(h.scale)), layout, pool)
    return _block_pool(probs[np.ix_(layout.perm, layout.perm)], layout, pool)


def target_scores_streaming(
    h: HeadTensors, layout: TileLayout, rows: QueryRowSubset | None = None
) -> np.ndarray:
    """Max-pooled tile scores in two passes without the ``n x n`` attention map.

    For each selected query tile, pass 1 walks the key tiles keeping running
    per-row max and sum-exp, and caches each block's per-row maximum as an
    exp-shifted value rescaled whenever the running max moves.  Pass 2
    divides the cache by the final sum-exp and max-reduces over the rows of
    the tile.  Returns one score row per selected query tile.
    """
    h.check_finite()
    qt = tile(h.q, layout)
    kt = tile(h.k, layout)
    nt, b, _ = qt.shape
    scale = DTYPE(h.scale)
    sel = np.arange(nt) if rows is None else np.asarray(rows.indices)
    out = np.empty((sel.size, nt), dtype=DTYPE)
    cache = np.empty((b, nt), dtype=DTYPE)
    for r, i in enumerate(sel):
        qi = qt[i]
        run_max = np.full(b, -np.inf, dtype=DTYPE)
        run_sum = np.zeros(b, dtype=DTYPE)
        for j in range(nt):
            logits = (qi @ kt[j].T) * scale
            block_max = logits.max(axis=1)
            new_max = np.maximum(run_max, block_max)
            alpha = np.exp(run_max - new_max)
            run_sum = run_sum * alpha + np.exp(logits - new_max[:, None]).sum(axis=1)
            cache[:, :j] *= alpha[:, None]
            cache[:, j] = np.exp(block_max - new_max)
            run_max = new_max
        out[r] = (cache / run_sum[:, None]).max(axis=0)
    return out


def row_normalize(s: np.ndarray) -> np.ndarray:
    """Divide each row by its sum; rows must be non-negative with a positive sum."""
    s = np.asarray(s)
    if (s < 0).any() or not np.isfinite(s).all():
        raise DomainError("row_normalize needs finite non-negative scores")
    sums = s.sum(axis=-1, keepdims=True, dtype=np.float64)
    if (sums <= 0).any():
        raise DegenerateRowError("cannot normalize a row with zero total score")
    return (s / sums).astype(s.dtype)


def topk_mask(s: np.ndarray, k: int) -> TileMask:
    """Per-row Top-k; equal scores resolve toward the lower key-tile index."""
    s = np.asarray(s)
    if not 1 <= k <= s.shape[1]:
        raise InvalidMaskError(f"k={k} outside [1, {s.shape[1]}]")
    if np.isnan(s).any():
        raise DomainError("NaN tile score")
    idx = np.argsort(-s, axis=1, kind="stable")[:, :k]
    return TileMask.from_indices(idx, s.shape[1])


def random_topk_mask(n_tiles: int, k: int, seed: int) -> TileMask:
    """Uniformly random ``k`` key tiles per query row (the uninformed baseline)."""
    rng = make_rng(seed, 0x52)
    idx = np.argsort(rng.random((n_tiles, n_tiles)), axis=1)[:, :k]
    return TileMask.from_indices(idx, n_tiles)


def oracle_mask(h: HeadTensors, layout: TileLayout, k: int, probs: np.ndarray | None = None) -> TileMask:
    """Top-k of the row-normalized max-pooled full-attention tile scores."""
    return topk_mask(row_normalize(target_scores_dense(h, layout, probs=probs)), k)
