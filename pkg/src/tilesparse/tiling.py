"""Tile configurations and the token <-> tile bijection.

Tokens of a ``(t, h, w)`` latent are flattened in raster order.  A tile
configuration ``(p_t, p_h, p_w)`` cuts the grid into axis-aligned boxes; the
layout permutation gathers every box into a contiguous run of ``b`` tokens.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import EmptySearchSpaceError, ShapeMismatchError


@dataclass(frozen=True)
class LatentShape:
    t: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.t, self.h, self.w) < 1:
            raise ValueError(f"latent extents must be >= 1, got {self.as_tuple()}")

    @property
    def n(self) -> int:
        return self.t * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)

    def to_dict(self) -> dict:
        return {"t": self.t, "h": self.h, "w": self.w}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentShape":
        return cls(int(d["t"]), int(d["h"]), int(d["w"]))


@dataclass(frozen=True, order=True)
class TileConfig:
    p_t: int
    p_h: int
    p_w: int

    def __post_init__(self):
        if min(self.p_t, self.p_h, self.p_w) < 1:
            raise ValueError(f"tile extents must be >= 1, got {self.as_tuple()}")

    @property
    def b(self) -> int:
        return self.p_t * self.p_h * self.p_w

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.p_t, self.p_h, self.p_w)

    def divides(self, shape: LatentShape) -> bool:
        return shape.t % self.p_t == 0 and shape.h % self.p_h == 0 and shape.w % self.p_w == 0

    def to_dict(self) -> dict:
        return {"pt": self.p_t, "ph": self.p_h, "pw": self.p_w}

    @classmethod
    def from_dict(cls, d: dict) -> "TileConfig":
        return cls(int(d["pt"]), int(d["ph"]), int(d["pw"]))

    def __str__(self) -> str:
        return f"{self.p_t}x{self.p_h}x{self.p_w}"


def enumerate_configs(b: int, shape: LatentShape | None = None) -> list[TileConfig]:
    """All ordered factorizations ``p_t * p_h * p_w == b`` in lexicographic order.

    With ``shape`` given, only configs whose extents divide the matching latent
    axis are kept; an empty result raises :class:`EmptySearchSpaceError`.
    """
    if b < 1:
        raise ValueError(f"tile size must be >= 1, got {b}")
    divisors = [x for x in range(1, b + 1) if b % x == 0]
    configs = []
    for pt in divisors:
        for ph in divisors:
            if (b // pt) % ph:
                continue
            configs.append(TileConfig(pt, ph, b // (pt * ph)))
    if shape is not None:
        configs = [c for c in configs if c.divides(shape)]
        if not configs:
            raise EmptySearchSpaceError(f"no factorization of b={b} divides shape {shape.as_tuple()}")
    return configs


@dataclass(frozen=True)
class TileLayout:
    shape: LatentShape
    config: TileConfig
    perm: np.ndarray = field(repr=False, compare=False)

    @property
    def b(self) -> int:
        return self.config.b

    @property
    def n_tiles(self) -> int:
        return self.shape.n // self.config.b

    @cached_property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    @cached_property
    def token_tile(self) -> np.ndarray:
        """Tile index of every token, in original (raster) token order."""
        return self.inverse // self.b

    def to_dict(self) -> dict:
        return {"shape": self.shape.to_dict(), "config": self.config.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TileLayout":
        return build_layout(LatentShape.from_dict(d["shape"]), TileConfig.from_dict(d["config"]))


def build_layout(shape: LatentShape, config: TileConfig) -> TileLayout:
    if not config.divides(shape):
        raise ShapeMismatchError(
            f"tile config {config.as_tuple()} does not divide latent shape {shape.as_tuple()}"
        )
    t, h, w = shape.as_tuple()
    pt, ph, pw = config.as_tuple()
    idx = np.arange(shape.n).reshape(t // pt, pt, h // ph, ph, w // pw, pw)
    # box axes first (raster over boxes), then in-box offsets (raster within a box)
    perm = idx.transpose(0, 2, 4, 1, 3, 5).reshape(-1)
    perm.setflags(write=False)
    return TileLayout(shape, config, perm)


def tile(x: np.ndarray, layout: TileLayout) -> np.ndarray:
    """Gather rows of ``x`` (n x d) into an ``n_tiles x b x d`` tiled tensor."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != layout.shape.n:
        raise ShapeMismatchError(f"expected ({layout.shape.n}, d) rows, got {x.shape}")
    return x[layout.perm].reshape(layout.n_tiles, layout.b, x.shape[1])


def untile(xt: np.ndarray, layout: TileLayout) -> np.ndarray:
    xt = np.asarray(xt)
    if xt.ndim != 3 or xt.shape[:2] != (layout.n_tiles, layout.b):
        raise ShapeMismatchError(f"expected ({layout.n_tiles}, {layout.b}, d), got {xt.shape}")
    out = np.empty((layout.shape.n, xt.shape[2]), dtype=xt.dtype)
    out[layout.perm] = xt.reshape(layout.shape.n, xt.shape[2])
    return out


def token_coords(shape: LatentShape) -> np.ndarray:
    """``(n, 3)`` integer (t, h, w) coordinates of raster-ordered tokens."""
    t, h, w = np.unravel_index(np.arange(shape.n), shape.as_tuple())
    return np.stack([t, h, w], axis=1)
