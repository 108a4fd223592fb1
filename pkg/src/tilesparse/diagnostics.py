"""Randomized sweeps of the statistical identities and bounds behind the pooled estimator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import bhatia_davis, dot_decomposition, renormalization_check, residual_bound
from .rng import make_rng

DECOMP_RTOL = 1e-6
RENORM_ATOL = 1e-12
# slack allowed for float64 rounding on quantities of order one
INEQ_ATOL = 1e-9


@dataclass
class SweepResult:
    name: str
    cases: int
    violations: int
    worst: float
    examples: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {"name": self.name, "cases": self.cases, "violations": self.violations, "worst": self.worst}


def _record(res: SweepResult, i: int, excess: float):
    res.worst = max(res.worst, excess)
    if excess > 0:
        res.violations += 1
        if len(res.examples) < 5:
            res.examples.append(i)


def _vec(rng, d):
    # mix of scales and offsets so means are not always near zero
    return (rng.normal(size=d) * rng.uniform(0.1, 3.0) + rng.normal() * rng.uniform(0, 2)).astype(np.float32)


def sweep_decomposition(cases: int = 1000, seed: int = 0) -> SweepResult:
    """``q . k == d mu_q mu_k + d Cov(q, k)`` within ``1e-6 |q| |k|``; float32 vectors, float64 accumulation."""
    rng = make_rng(seed, 0xD1)
    res = SweepResult("dot_decomposition", cases, 0, -np.inf)
    for i in range(cases):
        d = int(rng.integers(2, 129))
        q, k = _vec(rng, d), _vec(rng, d)
        mean_term, cov_term = dot_decomposition(q, k)
        exact = float(np.dot(q.astype(np.float64), k.astype(np.float64)))
        scale = float(np.linalg.norm(q.astype(np.float64)) * np.linalg.norm(k.astype(np.float64)))
        _record(res, i, abs(mean_term + cov_term - exact) - DECOMP_RTOL * scale)
    return res


def sweep_bhatia_davis(cases: int = 1000, seed: int = 0) -> SweepResult:
    rng = make_rng(seed, 0xD2)
    res = SweepResult("bhatia_davis", cases, 0, -np.inf)
    for i in range(cases):
        v = _vec(rng, int(rng.integers(1, 257)))
        if i % 10 == 0:
            # two-point vectors attain the bound
            v = np.where(rng.random(v.size) < 0.5, v.min(), v.max())
        var, bound, _ = bhatia_davis(v)
        _record(res, i, var - bound - INEQ_ATOL * max(1.0, bound))
    return res


def sweep_residual_bound(cases: int = 1000, seed: int = 0) -> SweepResult:
    rng = make_rng(seed, 0xD3)
    res = SweepResult("residual_bound", cases, 0, -np.inf)
    for i in range(cases):
        b, d = int(rng.integers(1, 65)), int(rng.integers(1, 33))
        tq = rng.normal(size=(b, d)) * rng.uniform(0.1, 3.0)
        tk = tq * rng.uniform(0.5, 2) if i % 10 == 0 else rng.normal(size=(b, d))
        e, bound = residual_bound(tq, tk)
        _record(res, i, e - bound - INEQ_ATOL * max(1.0, bound))
    return res


def sweep_renormalization(cases: int = 1000, seed: int = 0) -> SweepResult:
    rng = make_rng(seed, 0xD4)
    res = SweepResult("renormalization", cases, 0, -np.inf)
    for i in range(cases):
        n = int(rng.integers(1, 257))
        u = rng.normal(size=n) * rng.uniform(0.1, 20.0)
        keep = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        chk = renormalization_check(u, keep, tau=float(rng.uniform(0.25, 4.0)))
        _record(res, i, chk.max_deviation - RENORM_ATOL)
    return res


SWEEPS = {
    "dot_decomposition": sweep_decomposition,
    "bhatia_davis": sweep_bhatia_davis,
    "residual_bound": sweep_residual_bound,
    "renormalization": sweep_renormalization,
}


def run_all(cases: int = 1000, seed: int = 0) -> list[SweepResult]:
    return [fn(cases, seed) for fn in SWEEPS.values()]
