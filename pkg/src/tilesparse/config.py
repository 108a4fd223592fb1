"""Experiment configuration: JSON schema, validation and sparsity -> budget mapping."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .estimator.pooling import POOL_MODES
from .oracle import round_half_up
from .tiling import LatentShape, TileConfig, enumerate_configs

EXPERIMENTS = ("gen", "oracle", "distill", "search", "eval")
SUITES = ("standard", "structured")
OUT_ENV = "TILESPARSE_OUT"
DEFAULT_SPARSITY = (0.875, 0.9, 0.95)


def budget_for_sparsity(sparsity: float, n_tiles: int) -> int:
    """``k = round_half_up((1 - s) * n_tiles)`` clamped to ``[1, n_tiles]``."""
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1], got {sparsity}")
    return min(n_tiles, max(1, round_half_up((1.0 - sparsity) * n_tiles)))


def default_tile(b: int, shape: LatentShape) -> TileConfig:
    """Most cube-like feasible factorization of ``b``; first in canonical order on ties."""
    return min(enumerate_configs(b, shape), key=lambda c: max(c.as_tuple()) / min(c.as_tuple()))


def default_out_dir() -> str:
    return os.environ.get(OUT_ENV, "tilesparse_out")


@dataclass
class EstimatorSettings:
    steps: int = 1000
    lr: float = 6e-4
    d_hidden: int | None = None
    d_latent: int | None = None
    query_fraction: float = 0.25
    batch_size: int | None = 1
    loss_window: int = 100


@dataclass
class ExperimentConfig:
    experiment: str = "oracle"
    shape: tuple[int, int, int] = (8, 16, 16)
    d: int = 32
    b: int = 64
    tile: tuple[int, int, int] | None = None
    k: list[int] | None = None
    sparsity: list[float] | None = None
    suite: str = "standard"
    heads_file: str | None = None
    samples: int = 1
    pool_modes: list[str] = field(default_factory=lambda: ["triplet"])
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    checkpoint: str | None = None
    inputs: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None

    def __post_init__(self):
        self.shape = tuple(int(x) for x in self.shape)
        if self.tile is not None:
            self.tile = tuple(int(x) for x in self.tile)
        if isinstance(self.k, int):
            self.k = [self.k]
        if isinstance(self.sparsity, (int, float)):
            self.sparsity = [float(self.sparsity)]
        if isinstance(self.estimator, dict):
            known = {f.name for f in fields(EstimatorSettings)}
            extra = set(self.estimator) - known
            if extra:
                raise ConfigError(f"unknown estimator settings: {sorted(extra)}")
            self.estimator = EstimatorSettings(**self.estimator)
        if self.k is None and self.sparsity is None:
            self.sparsity = list(DEFAULT_SPARSITY)
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if (self.k is None) == (self.sparsity is None):
            raise ConfigError("give exactly one of 'k' and 'sparsity'")
        if self.suite not in SUITES:
            raise ConfigError(f"suite must be one of {SUITES}, got {self.suite!r}")
        bad = [m for m in self.pool_modes if m not in POOL_MODES]
        if bad or not self.pool_modes:
            raise ConfigError(f"pool_modes must be a non-empty subset of {POOL_MODES}, got {self.pool_modes}")
        if len(self.shape) != 3 or (self.tile is not None and len(self.tile) != 3):
            raise ConfigError("shape and tile take three extents (t, h, w)")
        if self.samples < 1 or not self.seeds:
            raise ConfigError("need samples >= 1 and at least one seed")
        if self.layout_config.b != self.b:
            raise ConfigError(f"tile {self.layout_config} does not hold b={self.b} tokens")
        if not self.layout_config.divides(self.latent):
            raise ConfigError(f"tile {self.layout_config} does not divide shape {self.shape}")
        n_tiles = self.n_tiles
        if self.k is not None and any(not 1 <= k <= n_tiles for k in self.k):
            raise ConfigError(f"k must lie in [1, {n_tiles}], got {self.k}")
        if self.sparsity is not None:
            for s in self.sparsity:
                budget_for_sparsity(s, n_tiles)

    @property
    def latent(self) -> LatentShape:
        return LatentShape(*self.shape)

    @property
    def layout_config(self) -> TileConfig:
        return TileConfig(*self.tile) if self.tile else default_tile(self.b, self.latent)

    @property
    def n_tiles(self) -> int:
        return self.latent.n // self.b

    def budgets(self) -> list[tuple[float, int]]:
        """``(sparsity, k)`` pairs in the order given; sparsity is ``1 - k/n_tiles`` for k-configs."""
        if self.k is not None:
            return [(1.0 - k / self.n_tiles, k) for k in self.k]
        return [(s, budget_for_sparsity(s, self.n_tiles)) for s in self.sparsity]

    @property
    def out_dir(self) -> str:
        return self.out or default_out_dir()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["tile"] = list(self.tile) if self.tile else None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)
