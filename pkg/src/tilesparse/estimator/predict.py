from __future__ import annotations

import numpy as np

from ..attention import HeadTensors, TileMask
from ..oracle import topk_mask
from ..tiling import TileLayout, tile
from .model import EstimatorParams, predict_scores
from .pooling import pool_descriptors


def predict_tile_scores(params: EstimatorParams, h: HeadTensors, layout: TileLayout, head: int = 0) -> np.ndarray:
    zq = pool_descriptors(tile(h.q, layout), params.mode)
    zk = pool_descriptors(tile(h.k, layout), params.mode)
    return predict_scores(zq, zk, params.heads[head])


def predict_mask(params: EstimatorParams, h: HeadTensors, layout: TileLayout, k: int, head: int = 0) -> TileMask:
    """tile -> pool -> project -> score -> per-row Top-k."""
    if k == layout.n_tiles:
        return TileMask.full(layout.n_tiles)
    return topk_mask(predict_tile_scores(params, h, layout, head), k)
