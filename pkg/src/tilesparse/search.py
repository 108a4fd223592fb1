"""Head-aware tiling search over factorizations of the hardware tile size."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import HeadTensors, full_attention
from .metrics import OutputErrorProbe
from .oracle import row_normalize, target_scores_dense, topk_mask
from .synth import CalibrationSet
from .tiling import LatentShape, TileConfig, build_layout, enumerate_configs

TIE_RTOL = 1e-6


@dataclass(frozen=True)
class SearchResult:
    head_id: str
    best: TileConfig
    error_table: dict[TileConfig, float]
    ties: list[TileConfig]

    def to_json(self) -> dict:
        return {
            "head_id": self.head_id,
            "best": self.best.to_dict(),
            "errors": [{"config": c.to_dict(), "value": v} for c, v in self.error_table.items()],
            "ties": [c.to_dict() for c in self.ties],
        }


def head_error(
    h: HeadTensors,
    shape: LatentShape,
    config: TileConfig,
    k: int,
    probs: np.ndarray | None = None,
    probe: OutputErrorProbe | None = None,
) -> float:
    """Squared Frobenius error of tile-sparse attention under the oracle mask for ``config``.

    ``probs``/``probe`` let callers reuse one full-attention pass across configs.
    """
    layout = build_layout(shape, config)
    if probs is None:
        _, probs = full_attention(h, return_probs=True)
    probe = probe or OutputErrorProbe(h)
    mask = topk_mask(row_normalize(target_scores_dense(h, layout, probs=probs)), k)
    return probe.squared_error(mask, layout)


def _select(head_id: str, table: dict[TileConfig, float]) -> SearchResult:
    # dict order is canonical config order, so min() breaks ties toward the first config
    best = min(table, key=table.get)
    floor = table[best]
    ties = [c for c, v in table.items() if v <= floor + TIE_RTOL * abs(floor)]
    return SearchResult(head_id, best, table, ties)


def search_tiling(cal: CalibrationSet, b: int, k: int) -> dict[str, SearchResult]:
    """Per head, the config minimizing summed oracle-mask reconstruction error over its samples."""
    configs = enumerate_configs(b, cal.shape)
    results = {}
    for head_id in cal.head_ids:
        table = {c: 0.0 for c in configs}
        for s in cal.for_head(head_id):
            _, probs = full_attention(s.tensors, return_probs=True)
            probe = OutputErrorProbe(s.tensors)
            for c in configs:
                table[c] += head_error(s.tensors, cal.shape, c, k, probs, probe)
        results[head_id] = _select(head_id, table)
    return results
