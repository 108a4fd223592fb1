"""Tile-sparse attention with learned tile-score estimation and head-aware tiling."""
from .attention import (
    FlopsReport,
    HeadTensors,
    TileMask,
    count_flops,
    dense_masked_attention,
    full_attention,
    sparse_attention,
)
from .config import ExperimentConfig, budget_for_sparsity
from .errors import TileSparseError
from .oracle import oracle_mask, target_scores_dense, target_scores_streaming, topk_mask
from .search import search_tiling
from .tiling import LatentShape, TileConfig, TileLayout, build_layout, enumerate_configs, tile, untile

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "FlopsReport", "HeadTensors", "LatentShape", "TileConfig", "TileLayout", "TileMask",
    "TileSparseError", "budget_for_sparsity", "build_layout", "count_flops", "dense_masked_attention",
    "enumerate_configs", "full_attention", "oracle_mask", "search_tiling", "sparse_attention",
    "target_scores_dense", "target_scores_streaming", "tile", "topk_mask", "untile",
]
