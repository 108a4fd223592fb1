"""Head-specific MLP projectors, the bilinear tile-score map and the KL distillation loss.

All gradients are analytic.  Descriptors enter as constants: nothing here
differentiates with respect to the backbone's Q/K.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..attention import softmax_rows
from ..errors import DomainError, ShapeMismatchError
from ..rng import make_rng
from .pooling import descriptor_width

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_tanh(x):
    return np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))


def gelu(x, t=None):
    """Tanh-approximated GELU; ``t`` may carry a precomputed ``_gelu_tanh(x)``."""
    t = _gelu_tanh(x) if t is None else t
    return 0.5 * x * (1.0 + t)


def gelu_grad(x, t=None):
    t = _gelu_tanh(x) if t is None else t
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * (x * x))


@dataclass
class MLP:
    """Two-layer projector ``gelu(x @ w1 + b1) @ w2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    FIELDS = ("w1", "b1", "w2", "b2")

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def astype(self, dtype) -> "MLP":
        return MLP(*(a.astype(dtype) for a in self.arrays()))

    def forward(self, x):
        z = x @ self.w1 + self.b1
        t = _gelu_tanh(z)
        a = gelu(z, t)
        return a @ self.w2 + self.b2, (x, z, a, t)

    def backward(self, cache, dout) -> "MLP":
        x, z, a, t = cache
        # collapse any leading batch axes
        x2 = x.reshape(-1, x.shape[-1])
        a2 = a.reshape(-1, a.shape[-1])
        dout2 = dout.reshape(-1, dout.shape[-1])
        dz = (dout2 @ self.w2.T) * gelu_grad(z, t).reshape(dout2.shape[0], -1)
        return MLP(x2.T @ dz, dz.sum(axis=0), a2.T @ dout2, dout2.sum(axis=0))


@dataclass
class HeadParams:
    q: MLP
    k: MLP

    def arrays(self) -> list[np.ndarray]:
        return self.q.arrays() + self.k.arrays()


@dataclass
class EstimatorParams:
    heads: list[HeadParams]
    mode: str
    d: int
    version: int = field(default=1, repr=False)

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_in(self) -> int:
        return self.heads[0].q.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.heads[0].q.w1.shape[1]

    @property
    def d_latent(self) -> int:
        return self.heads[0].q.w2.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [a for hp in self.heads for a in hp.arrays()]

    def copy(self) -> "EstimatorParams":
        heads = [HeadParams(MLP(*(a.copy() for a in hp.q.arrays())), MLP(*(a.copy() for a in hp.k.arrays())))
                 for hp in self.heads]
        return EstimatorParams(heads, self.mode, self.d)


def _xavier(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_params(
    n_heads: int,
    d: int,
    mode: str = "triplet",
    d_hidden: int | None = None,
    d_latent: int | None = None,
    seed: int = 0,
    dtype=np.float32,
    zero: bool = False,
) -> EstimatorParams:
    """Xavier-uniform weights and zero biases; independent draws per head and per side."""
    d_in = descriptor_width(mode, d)
    d_hidden = d_hidden or 2 * d_in
    d_latent = d_latent or d
    heads = []
    for h in range(n_heads):
        sides = []
        for side in (0, 1):
            rng = make_rng(seed, 0xE5, h, side)
            if zero:
                w1 = np.zeros((d_in, d_hidden), dtype)
                w2 = np.zeros((d_hidden, d_latent), dtype)
            else:
                w1 = _xavier(rng, d_in, d_hidden, dtype)
                w2 = _xavier(rng, d_hidden, d_latent, dtype)
            sides.append(MLP(w1, np.zeros(d_hidden, dtype), w2, np.zeros(d_latent, dtype)))
        heads.append(HeadParams(*sides))
    return EstimatorParams(heads, mode, d)


def predict_scores(zq: np.ndarray, zk: np.ndarray, hp: HeadParams) -> np.ndarray:
    """Predicted tile logits ``phi_q(zq) phi_k(zk)^T / sqrt(d')``."""
    if zq.shape[-1] != hp.q.w1.shape[0] or zk.shape[-1] != hp.k.w1.shape[0]:
        raise ShapeMismatchError(
            f"descriptor widths {zq.shape[-1]}/{zk.shape[-1]} do not match projector input {hp.q.w1.shape[0]}"
        )
    eq, _ = hp.q.forward(zq)
    ek, _ = hp.k.forward(zk)
    return (eq @ np.swapaxes(ek, -1, -2)) / np.sqrt(eq.shape[-1]).astype(eq.dtype)


def predicted_distribution(s_pred: np.ndarray) -> np.ndarray:
    return softmax_rows(np.array(s_pred, copy=True))


def log_softmax_rows(s):
    z = s - s.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_stochastic(a, atol=1e-5):
    if (a < 0).any() or not np.isfinite(a).all():
        raise DomainError("target distribution has negative or non-finite entries")
    dev = np.abs(a.sum(axis=-1, dtype=np.float64) - 1.0).max()
    if dev > atol:
        raise DomainError(f"target rows are not stochastic (max |sum - 1| = {dev:.3g})")


def _select(x, rows):
    return x if rows is None else x[..., np.asarray(getattr(rows, "indices", rows)), :]


def kl_rows(a_tgt, s_pred):
    """Per-row ``KL(a || softmax(s))`` with ``0 log 0 := 0``."""
    logp = log_softmax_rows(s_pred.astype(np.float64))
    a = a_tgt.astype(np.float64)
    pos = a > 0
    terms = np.zeros_like(a)
    terms[pos] = a[pos] * (np.log(a[pos]) - logp[pos])
    return terms.sum(axis=-1)


def distill_loss(a_tgt: np.ndarray, s_pred: np.ndarray, rows=None) -> float:
    """Mean row-wise ``KL(target || softmax(predicted logits))`` over the selected query rows."""
    if a_tgt.shape != s_pred.shape:
        raise ShapeMismatchError(f"target {a_tgt.shape} vs prediction {s_pred.shape}")
    a = _select(a_tgt, rows)
    _check_stochastic(a)
    return float(kl_rows(a, _select(s_pred, rows)).mean())


def score_gradient(a_tgt, s_pred, n_rows_total: int):
    """``d loss / d logits`` for rows already selected: ``(softmax(s) - a) / R``."""
    return (softmax_rows(np.array(s_pred, copy=True)) - a_tgt) / n_rows_total


def loss_and_gradients(hp: HeadParams, zq, zk, a_tgt, rows=None, n_rows_total: int | None = None):
    """Loss contribution and analytic parameter gradients for one head.

    ``zq, zk`` are ``[batch x] n_tiles x d_in`` descriptors and ``a_tgt`` the
    ``[batch x] n_tiles x n_tiles`` targets; ``rows`` selects supervised query
    tiles (shared across the batch).  The loss is the sum of row KLs divided by
    ``n_rows_total`` (default: the number of supervised rows here), so heads
    and samples can be combined into a single global mean.
    """
    zq_sel = _select(zq, rows)
    a_sel = _select(a_tgt, rows)
    _check_stochastic(a_sel)
    rows_here = int(np.prod(a_sel.shape[:-1]))
    total = n_rows_total or rows_here

    eq, cq = hp.q.forward(zq_sel)
    ek, ck = hp.k.forward(zk)
    inv = 1.0 / math.sqrt(eq.shape[-1])
    s = (eq @ np.swapaxes(ek, -1, -2)) * inv
    loss = float(kl_rows(a_sel, s).sum() / total)

    g = score_gradient(a_sel, s, total).astype(eq.dtype)
    d_eq = (g @ ek) * inv
    d_ek = (np.swapaxes(g, -1, -2) @ eq) * inv
    return loss, HeadParams(hp.q.backward(cq, d_eq), hp.k.backward(ck, d_ek))


def loss_gradients(hp: HeadParams, zq, zk, a_tgt, rows=None) -> HeadParams:
    return loss_and_gradients(hp, zq, zk, a_tgt, rows)[1]
