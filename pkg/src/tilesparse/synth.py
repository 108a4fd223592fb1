"""Seeded synthetic attention heads with controllable spatiotemporal structure.

A head's logits are built as a sum of feature-kernel terms

    logit(u, v) = sum_c  w_c * <f_c(u), f_c(v)>

realized by ``q_u = r [sqrt(w_c) f_c(u)]_c R`` and ``k_v = r [sqrt(w_c) f_c(v)]_c R``
with ``r = d ** 0.25`` (so ``q.k / sqrt(d)`` equals the logit) and a random
rotation ``R`` shared by the head.  Before rotation the ``d`` coordinates are
split into a structure block and two nuisance blocks of ``d // 4`` each:

* ``noise``: Gaussian noise on the structure block of Q and K; it perturbs
  the logits;
* ``nuisance``: Gaussian noise on Q's nuisance block and on K's (disjoint)
  nuisance block; orthogonal to every key, so it never changes attention but
  does contaminate coordinate-wise tile statistics.

V is i.i.d. standard normal.  Feature terms:

* identity codes: unit vectors per group (orthonormal when they fit), giving
  ``~w`` for tokens in the same group and ``~0`` otherwise;
* low-frequency axis cosines ``cos(pi * delta / L)``, a smooth locality kernel
  along one latent axis (what rotary embeddings induce at low frequency);
* sinks: a constant query feature matched by a few designated key tokens.

Isotropic heads skip all of this: Q, K and V are i.i.d. Gaussian with
standard deviation ``noise`` (Q, K) and 1 (V).

The head itself (kind, strengths, rotation, positional kernels) depends only
on ``spec.seed``.  Content drawn per ``sample`` (identity codes, sink
positions, noise, values) varies between samples, so several samples of one
spec behave like one head seen on different inputs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attention import DTYPE, HeadTensors
from .errors import ShapeMismatchError
from .rng import make_rng
from .tiling import LatentShape, token_coords

KINDS = ("local_spatial", "temporal_stride", "global_mixture", "isotropic")

# base logit weights per unit strength
TEMPORAL_IDENTITY = 12.0
LOCAL_FRAME = 8.0
LOCAL_AXIS = 6.0
SINK_LOGIT = 7.0


@dataclass(frozen=True)
class HeadPatternSpec:
    kind: str
    shape: LatentShape = field(default_factory=lambda: LatentShape(8, 16, 16))
    d: int = 32
    seed: int = 0
    strength: float = 1.0
    noise: float = 0.5
    nuisance: float = 1.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {KINDS}")
        if self.strength < 0 or self.noise < 0 or self.nuisance < 0:
            raise ValueError("strength, noise and nuisance must be non-negative")
        if self.d < 8:
            raise ValueError("synthetic heads need d >= 8")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["shape"] = self.shape.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HeadPatternSpec":
        d = dict(d)
        if "shape" in d:
            d["shape"] = LatentShape.from_dict(d["shape"])
        return cls(**d)


def _identity_codes(rng, n_groups: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((max(n_groups, dim), dim))
    if n_groups <= dim:
        qmat, _ = np.linalg.qr(g[:dim].T)
        return qmat.T[:n_groups]
    g = g[:n_groups]
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _axis_cos(pos: np.ndarray, length: int) -> np.ndarray:
    ang = np.pi * pos / max(length, 1)
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _features(spec: HeadPatternSpec, rng) -> tuple[np.ndarray, np.ndarray]:
    """Unrotated, unscaled (q-side, k-side) feature matrices ``n x m``; ``rng`` is the per-sample stream."""
    shape = spec.shape
    coords = token_coords(shape)
    t, hh, ww = coords[:, 0], coords[:, 1], coords[:, 2]
    s = spec.strength
    fq, fk = [], []

    def add(wt, fq_c, fk_c=None):
        fq.append(np.sqrt(wt) * fq_c)
        fk.append(np.sqrt(wt) * (fq_c if fk_c is None else fk_c))

    d_struct = structure_dim(spec.d)

    def add_local(scale):
        frame_dim = min(shape.t, d_struct - 5)
        codes = _identity_codes(rng, shape.t, frame_dim)
        add(scale * LOCAL_FRAME * s, codes[t])
        add(scale * LOCAL_AXIS * s, _axis_cos(hh, shape.h))
        add(scale * LOCAL_AXIS * s, _axis_cos(ww, shape.w))

    if spec.kind == "temporal_stride":
        codes = _identity_codes(rng, shape.h * shape.w, d_struct)
        add(TEMPORAL_IDENTITY * s, codes[hh * shape.w + ww])
    elif spec.kind == "local_spatial":
        add_local(1.0)
    elif spec.kind == "global_mixture":
        add_local(0.6)
        n_sinks = max(1, shape.n // 512)
        sinks = rng.choice(shape.n, size=n_sinks, replace=False)
        ind = np.zeros((shape.n, 1))
        ind[sinks] = 1.0
        add(SINK_LOGIT * s, np.ones((shape.n, 1)), ind)
    if not fq:
        return np.zeros((shape.n, 0)), np.zeros((shape.n, 0))
    return np.concatenate(fq, axis=1), np.concatenate(fk, axis=1)


def structure_dim(d: int) -> int:
    return d - 2 * (d // 4)


def sink_tokens(spec: HeadPatternSpec, sample: int = 0) -> np.ndarray:
    """Raster indices of the sink keys of a global_mixture head (empty otherwise)."""
    if spec.kind != "global_mixture":
        return np.zeros(0, dtype=int)
    _, fk = _features(spec, make_rng(spec.seed, 0x5E, sample))
    return np.flatnonzero(fk[:, -1] > 0)


def generate_head(spec: HeadPatternSpec, sample: int = 0) -> HeadTensors:
    """Deterministic Q/K/V for ``spec``; ``sample`` selects an independent input draw."""
    n, d = spec.shape.n, spec.d
    if spec.kind == "isotropic":
        g = make_rng(spec.seed, 0x90, sample)
        q, k = spec.noise * g.standard_normal((2, n, d))
        v = make_rng(spec.seed, 0x7F, sample).standard_normal((n, d))
        return HeadTensors(q.astype(DTYPE), k.astype(DTYPE), v.astype(DTYPE))
    fq, fk = _features(spec, make_rng(spec.seed, 0x5E, sample))
    m = fq.shape[1]
    ds, dn = structure_dim(d), d // 4
    if m > ds:
        raise ShapeMismatchError(f"{spec.kind} features need {m} dims, head has {ds} structure dims")
    r = d**0.25
    q = np.zeros((n, d))
    k = np.zeros((n, d))
    q[:, :m] = r * fq
    k[:, :m] = r * fk
    noise_rng = make_rng(spec.seed, 0x90, sample)
    q[:, :ds] += spec.noise * noise_rng.standard_normal((n, ds))
    k[:, :ds] += spec.noise * noise_rng.standard_normal((n, ds))
    q[:, ds:ds + dn] = spec.nuisance * noise_rng.standard_normal((n, dn))
    k[:, ds + dn:] = spec.nuisance * noise_rng.standard_normal((n, d - ds - dn))
    rot, _ = np.linalg.qr(make_rng(spec.seed, 0x0A).standard_normal((d, d)))
    q, k = q @ rot, k @ rot
    v = make_rng(spec.seed, 0x7F, sample).standard_normal((n, d))
    return HeadTensors(q.astype(DTYPE), k.astype(DTYPE), v.astype(DTYPE))


@dataclass(frozen=True)
class CalibrationSample:
    tensors: HeadTensors
    head_id: str
    tag: str
    spec: HeadPatternSpec | None = None
    sample: int = 0


@dataclass
class CalibrationSet:
    samples: list[CalibrationSample]
    shape: LatentShape

    def __post_init__(self):
        if not self.samples:
            raise ValueError("calibration set is empty")
        d = self.samples[0].tensors.d
        for s in self.samples:
            if s.tensors.n != self.shape.n or s.tensors.d != d:
                raise ShapeMismatchError(
                    f"sample {s.tag} has (n={s.tensors.n}, d={s.tensors.d}), "
                    f"expected (n={self.shape.n}, d={d})"
                )

    def __len__(self):
        return len(self.samples)

    @property
    def head_ids(self) -> list[str]:
        return list(dict.fromkeys(s.head_id for s in self.samples))

    def for_head(self, head_id: str) -> list[CalibrationSample]:
        return [s for s in self.samples if s.head_id == head_id]

    def duplicated(self) -> "CalibrationSet":
        return CalibrationSet(self.samples + [replace(s, tag=s.tag + "+dup") for s in self.samples], self.shape)


def spec_tag(spec: HeadPatternSpec) -> str:
    return f"{spec.kind}:seed={spec.seed}:strength={spec.strength:g}:noise={spec.noise:g}:nuisance={spec.nuisance:g}"


def generate_calibration(specs, count: int = 1, head_ids=None) -> CalibrationSet:
    """``count`` samples per spec; sample ``i`` of spec ``j`` is tagged and assigned head ``head_ids[j]``."""
    specs = list(specs)
    if not specs:
        raise ValueError("no head specs given")
    if head_ids is None:
        head_ids = [f"h{j}" for j in range(len(specs))]
    shape = specs[0].shape
    for sp in specs:
        if sp.shape != shape:
            raise ShapeMismatchError(f"spec {spec_tag(sp)} has shape {sp.shape.as_tuple()}, expected {shape.as_tuple()}")
    samples = [
        CalibrationSample(generate_head(sp, i), hid, f"{spec_tag(sp)}:sample={i}", sp, i)
        for sp, hid in zip(specs, head_ids)
        for i in range(count)
    ]
    return CalibrationSet(samples, shape)


def standard_suite(seed: int = 0, shape: LatentShape | None = None, d: int = 32) -> list[HeadPatternSpec]:
    """The four-head reference suite, one head per pattern kind."""
    shape = shape or LatentShape(8, 16, 16)
    return [HeadPatternSpec(kind, shape, d, seed=seed * 1000 + i) for i, kind in enumerate(KINDS)]


def structured_suite(seed: int = 0, shape: LatentShape | None = None, d: int = 32) -> list[HeadPatternSpec]:
    shape = shape or LatentShape(8, 16, 16)
    return [HeadPatternSpec(kind, shape, d, seed=seed * 1000 + i) for i, kind in enumerate(KINDS[:3])]


def save_spec_file(path, specs):
    from .fileutil import atomic_write_text

    atomic_write_text(path, json.dumps([s.to_dict() for s in specs], indent=2, sort_keys=True) + "\n")


def load_spec_file(path) -> list[HeadPatternSpec]:
    with open(path) as f:
        return [HeadPatternSpec.from_dict(x) for x in json.load(f)]
