from __future__ import annotations

import numpy as np

POOL_MODES = ("triplet", "avg", "maxmin")
_WIDTH = {"triplet": 3, "avg": 1, "maxmin": 2}


def descriptor_width(mode: str, d: int) -> int:
    if mode not in _WIDTH:
        raise ValueError(f"unknown pool mode {mode!r}; expected one of {POOL_MODES}")
    return _WIDTH[mode] * d


def pool_descriptors(xt: np.ndarray, mode: str = "triplet") -> np.ndarray:
    """Per-tile coordinate statistics of an ``n_tiles x b x d`` tensor.

    ``triplet`` concatenates avg, max and min; ``avg`` and ``maxmin`` are the
    reduced ablation variants.  Leading batch axes are allowed.
    """
    descriptor_width(mode, xt.shape[-1])
    parts = []
    if mode in ("triplet", "avg"):
        parts.append(xt.mean(axis=-2, dtype=np.float64).astype(xt.dtype))
    if mode in ("triplet", "maxmin"):
        parts.append(xt.max(axis=-2))
        parts.append(xt.min(axis=-2))
    return np.concatenate(parts, axis=-1)
