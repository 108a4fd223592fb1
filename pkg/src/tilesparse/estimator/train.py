"""Distillation trainer: fit the projectors to max-pooled full-attention targets.

Training runs on *supervision records*: per calibration sample, the tile
statistics of Q and K and the row-normalized target distribution for the
supervised query tiles.  Records are computed once from the backbone tensors
(which are only read) and can be shared across pool modes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..attention import DTYPE, HeadTensors, softmax_rows
from ..errors import ShapeMismatchError, TrainingDivergedError
from ..oracle import (
    DENSE_MAX_ELEMENTS,
    QueryRowSubset,
    row_normalize,
    sample_query_rows,
    target_scores_streaming,
)
from ..rng import derive_seed
from ..tiling import TileLayout, tile
from .model import EstimatorParams, init_params, loss_and_gradients

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "triplet"
    steps: int = 1000
    lr: float = 6e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    d_hidden: int | None = None
    d_latent: int | None = None
    query_fraction: float = 0.25
    # samples per head per step; None trains on every record at every step
    batch_size: int | None = None
    seed: int = 0


@dataclass
class TrainState:
    step: int
    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    history: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: EstimatorParams, lr: float) -> "TrainState":
        arrs = params.arrays()
        return cls(0, lr, [np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: TrainState, betas, eps):
    """In-place bias-corrected Adam update of ``params``."""
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


@dataclass(frozen=True)
class SupervisionRecord:
    head: int
    q_stats: np.ndarray  # 3 x supervised rows x d: avg, max, min of query tiles
    k_stats: np.ndarray  # 3 x n_tiles x d
    target: np.ndarray  # supervised rows x n_tiles, row-stochastic

    def descriptors(self, mode: str) -> tuple[np.ndarray, np.ndarray]:
        pick = {"triplet": [0, 1, 2], "avg": [0], "maxmin": [1, 2]}[mode]
        return (np.concatenate([self.q_stats[i] for i in pick], axis=-1),
                np.concatenate([self.k_stats[i] for i in pick], axis=-1))


def _tile_stats(xt):
    return np.stack([xt.mean(axis=1, dtype=np.float64).astype(xt.dtype), xt.max(axis=1), xt.min(axis=1)])


def _targets(h: HeadTensors, layout: TileLayout, rows: QueryRowSubset) -> np.ndarray:
    b = layout.b
    if len(rows) * b * h.n > DENSE_MAX_ELEMENTS:
        return row_normalize(target_scores_streaming(h, layout, rows))
    # dense over the supervised query rows only
    qt = tile(h.q, layout)[rows.indices].reshape(-1, h.d)
    kt = h.k[layout.perm]
    p = softmax_rows((qt @ kt.T) * DTYPE(h.scale))
    s = p.reshape(len(rows), b, layout.n_tiles, b).max(axis=(1, 3))
    return row_normalize(s)


def _unpack(item):
    if len(item) == 2:
        return item[0], item[1], 0
    return item[0], item[1], int(item[2])


def make_record(h: HeadTensors, layout: TileLayout, head: int, rows: QueryRowSubset) -> SupervisionRecord:
    qs = _tile_stats(tile(h.q, layout))[:, rows.indices]
    ks = _tile_stats(tile(h.k, layout))
    return SupervisionRecord(head, qs, ks, _targets(h, layout, rows))


def build_supervision(calibration, query_fraction: float = 0.25, seed: int = 0) -> list[SupervisionRecord]:
    """Records for an iterable of ``(HeadTensors, TileLayout[, head_index])`` items.

    The supervised query tiles of item ``i`` are a seeded random subset of
    size ``query_fraction * n_tiles``.
    """
    records = []
    for idx, item in enumerate(calibration):
        h, layout, head = _unpack(item)
        rows = sample_query_rows(layout.n_tiles, query_fraction, derive_seed(seed, 0x7A, idx))
        records.append(make_record(h, layout, head, rows))
    return records


@dataclass
class _HeadBatch:
    zq: np.ndarray  # samples x supervised rows x d_in
    zk: np.ndarray  # samples x n_tiles x d_in
    a: np.ndarray  # samples x supervised rows x n_tiles

    @property
    def rows(self) -> int:
        return self.a.shape[0] * self.a.shape[1]


def _stack(records, mode) -> _HeadBatch:
    shapes = {(r.q_stats.shape, r.k_stats.shape) for r in records}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"head {records[0].head} mixes records of different shapes: {shapes}")
    zq, zk = zip(*(r.descriptors(mode) for r in records))
    return _HeadBatch(np.stack(zq), np.stack(zk), np.stack([r.target for r in records]))


def group_by_head(records) -> dict[int, list[SupervisionRecord]]:
    out: dict[int, list[SupervisionRecord]] = {}
    for r in records:
        out.setdefault(r.head, []).append(r)
    return dict(sorted(out.items()))


def evaluate_loss(params: EstimatorParams, records) -> float:
    """Mean row KL of ``params`` over ``records`` (no update)."""
    batches = {h: _stack(rs, params.mode) for h, rs in group_by_head(records).items()}
    total = sum(b.rows for b in batches.values())
    return sum(loss_and_gradients(params.heads[h], b.zq, b.zk, b.a, None, total)[0] for h, b in batches.items())


def final_loss(history, window: int = 100) -> float:
    """Average training loss over the last ``window`` steps."""
    return float(np.mean(history[-window:]))


def train(calibration, cfg: TrainConfig | None = None, params: EstimatorParams | None = None):
    """Fit per-head projectors.

    ``calibration`` is a sequence of ``(HeadTensors, TileLayout[, head_index])``
    items or of prebuilt :class:`SupervisionRecord`.  With ``cfg.batch_size``
    set, step ``s`` uses records ``s*bs .. s*bs+bs-1`` (cyclically) of every
    head, so a long enough calibration stream is never revisited.  Returns
    ``(params, history)``; ``history[s]`` is the loss before update ``s``.
    """
    cfg = cfg or TrainConfig()
    calibration = list(calibration)
    if not calibration:
        raise ValueError("calibration set is empty")
    if isinstance(calibration[0], SupervisionRecord):
        records = calibration
    else:
        records = build_supervision(calibration, cfg.query_fraction, cfg.seed)
    per_head = group_by_head(records)
    d = records[0].k_stats.shape[-1]
    if params is None:
        params = init_params(max(per_head) + 1, d, cfg.mode, cfg.d_hidden, cfg.d_latent, seed=cfg.seed)
    else:
        params = params.copy()
    full = None if cfg.batch_size else {h: _stack(rs, cfg.mode) for h, rs in per_head.items()}
    state = TrainState.fresh(params, cfg.lr)
    flat = params.arrays()

    for step in range(cfg.steps):
        if full is not None:
            batches = full
        else:
            bs = cfg.batch_size
            batches = {h: _stack([rs[(step * bs + j) % len(rs)] for j in range(bs)], cfg.mode)
                       for h, rs in per_head.items()}
        total = sum(b.rows for b in batches.values())
        loss = 0.0
        grads = {}
        for head, b in batches.items():
            l, g = loss_and_gradients(params.heads[head], b.zq, b.zk, b.a, None, total)
            loss += l
            grads[head] = g
        if not np.isfinite(loss):
            last = state.history[-1] if state.history else float("nan")
            worst = max(float(np.abs(a).max()) for a in flat)
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (previous loss {last:.6g}, max |param| {worst:.3g}, lr {cfg.lr})"
            )
        state.history.append(loss)
        grad_flat = []
        for head, hp in enumerate(params.heads):
            if head in grads:
                grad_flat.extend(grads[head].arrays())
            else:
                grad_flat.extend(np.zeros_like(a) for a in hp.arrays())
        adam_step(flat, grad_flat, state, cfg.betas, cfg.eps)
        if step % 200 == 0:
            log.debug("step %d loss %.6f", step, loss)
    return params, state.history
