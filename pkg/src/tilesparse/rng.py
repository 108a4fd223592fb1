"""Seeded random streams.

Every stream is a Philox-4x64 counter-based generator keyed by a
``SeedSequence`` built from a 64-bit seed plus integer stream labels, so the
same ``(seed, *labels)`` reproduces the same numbers on every platform.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def make_rng(seed: int, *labels: int) -> np.random.Generator:
    entropy = [int(seed) & MASK64, *(int(x) & MASK64 for x in labels)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *labels: int) -> int:
    """A fresh 64-bit seed deterministically derived from ``seed`` and ``labels``."""
    entropy = [int(seed) & MASK64, *(int(x) & MASK64 for x in labels)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])
