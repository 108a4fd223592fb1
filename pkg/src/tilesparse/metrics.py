"""Mask-quality metrics, output error, and numerical checks of the pooling theory."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import HeadTensors, TiledHeads, TileMask, softmax_rows, sparse_attention
from .errors import InvalidMaskError
from .tiling import TileLayout, untile


def _check_pair(pred: TileMask, ref: TileMask):
    if pred.m.shape != ref.m.shape:
        raise InvalidMaskError(f"mask shapes differ: {pred.m.shape} vs {ref.m.shape}")
    if pred.k != ref.k:
        raise InvalidMaskError(f"mask budgets differ: k={pred.k} vs k={ref.k}")


def tile_recall(pred: TileMask, ref: TileMask) -> float:
    """Mean over query rows of ``|pred_row & ref_row| / k``."""
    _check_pair(pred, ref)
    return float((pred.m & ref.m).sum(axis=1).mean() / ref.k)


@dataclass(frozen=True)
class MaskConfusion:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    k: int

    @property
    def totals(self) -> tuple[int, int, int]:
        return int(self.tp.sum()), int(self.fp.sum()), int(self.fn.sum())


def mask_confusion(pred: TileMask, ref: TileMask) -> MaskConfusion:
    _check_pair(pred, ref)
    tp = (pred.m & ref.m).sum(axis=1)
    fp = (pred.m & ~ref.m).sum(axis=1)
    fn = (~pred.m & ref.m).sum(axis=1)
    return MaskConfusion(tp, fp, fn, ref.k)


def output_error(o_ref: np.ndarray, o_test: np.ndarray) -> float:
    """Frobenius norm of ``o_ref - o_test`` (accumulated in float64)."""
    diff = np.asarray(o_ref, dtype=np.float64) - np.asarray(o_test, dtype=np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


class OutputErrorProbe:
    """Output error of tile masks on one head, measured in float64.

    The full-attention reference and every tile-sparse output are computed
    in double precision, so the error reflects the mask and not float32
    rounding (a full mask gives ~1e-14).
    """

    def __init__(self, h: HeadTensors):
        self.q, self.k, self.v = (x.astype(np.float64) for x in (h.q, h.k, h.v))
        self.o_full = softmax_rows((self.q @ self.k.T) * (1.0 / math.sqrt(h.d))) @ self.v

    def sparse_output(self, mask: TileMask, layout: TileLayout) -> np.ndarray:
        tiled = TiledHeads(*(x[layout.perm].reshape(layout.n_tiles, layout.b, -1) for x in (self.q, self.k, self.v)))
        return untile(sparse_attention(tiled, mask), layout)

    def error(self, mask: TileMask, layout: TileLayout) -> float:
        """Frobenius norm ``||O_full - O_sparse||``."""
        return output_error(self.o_full, self.sparse_output(mask, layout))

    def squared_error(self, mask: TileMask, layout: TileLayout) -> float:
        diff = self.o_full - self.sparse_output(mask, layout)
        return float(np.sum(diff * diff))


@dataclass(frozen=True)
class VectorStats:
    mu: float
    mn: float
    mx: float
    sigma: float

    @classmethod
    def of(cls, v) -> "VectorStats":
        v = np.asarray(v, dtype=np.float64)
        mu = float(v.mean())
        # clamp: rounding can put the mean a hair outside [min, max]
        return cls(min(max(mu, float(v.min())), float(v.max())), float(v.min()), float(v.max()), float(v.std()))

    @property
    def dispersion(self) -> float:
        return math.sqrt(max((self.mx - self.mu) * (self.mu - self.mn), 0.0))


@dataclass(frozen=True)
class RenormalizationCheck:
    z: float
    z_hat: float
    ratio: np.ndarray  # masked / full probability per retained index
    max_deviation: float


def renormalization_check(u, retained, tau: float = 1.0) -> RenormalizationCheck:
    """Compare masked-softmax probabilities on ``retained`` with ``(Z / Z_hat) * P``.

    Partition functions are computed relative to ``max(u)`` so only their
    ratio is meaningful at extreme logits.
    """
    u = np.asarray(u, dtype=np.float64)
    retained = np.unique(np.asarray(retained, dtype=int))
    if retained.size == 0:
        raise ValueError("retained index set is empty")
    if tau <= 0:
        raise ValueError("tau must be positive")
    e = np.exp((u - u.max()) / tau)
    z, z_hat = e.sum(), e[retained].sum()
    p = e / z
    p_masked = e[retained] / z_hat
    dev = float(np.abs(p_masked - (z / z_hat) * p[retained]).max())
    # entries whose probability underflows to 0 get the exact ratio Z / Z_hat
    ratio = np.divide(p_masked, p[retained], out=np.full(retained.size, z / z_hat), where=p[retained] > 0)
    return RenormalizationCheck(float(z), float(z_hat), ratio, dev)


def dot_decomposition(q, k) -> tuple[float, float]:
    """Split ``q . k`` into ``d mu_q mu_k`` and ``d Cov(q, k)`` (population covariance)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d = q.size
    mq, mk = q.mean(), k.mean()
    return float(d * mq * mk), float(np.sum((q - mq) * (k - mk)))


def bhatia_davis(v) -> tuple[float, float, float]:
    """``(variance, (M - mu)(mu - m), slack)``; slack is non-negative up to rounding."""
    st = VectorStats.of(v)
    var = st.sigma**2
    bound = (st.mx - st.mu) * (st.mu - st.mn)
    return var, bound, bound - var


def residual_bound(tq, tk) -> tuple[float, float]:
    """``E = |sum_i <r_q,i, r_k,i>|`` and its Cauchy-Schwarz bound ``B sigma_q sigma_k``.

    Residuals are taken against each tile's mean token; ``sigma^2`` is the
    mean squared residual norm.
    """
    tq = np.asarray(tq, dtype=np.float64)
    tk = np.asarray(tk, dtype=np.float64)
    rq = tq - tq.mean(axis=0)
    rk = tk - tk.mean(axis=0)
    b = tq.shape[0]
    e = abs(float(np.sum(rq * rk)))
    sq = math.sqrt(np.sum(rq * rq) / b)
    sk = math.sqrt(np.sum(rk * rk) / b)
    return e, b * sq * sk


def approx_stat_score(sq: VectorStats, sk: VectorStats, d: int, lam: float = 1.0) -> float:
    """``d mu_q mu_k + lam * Delta_q Delta_k`` with ``Delta = sqrt((M - mu)(mu - m))``."""
    return d * sq.mu * sk.mu + lam * sq.dispersion * sk.dispersion
