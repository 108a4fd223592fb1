"""Statistic-aware tile-score estimator."""
from .model import (
    MLP,
    EstimatorParams,
    HeadParams,
    distill_loss,
    init_params,
    loss_and_gradients,
    loss_gradients,
    predict_scores,
    predicted_distribution,
    score_gradient,
)
from .pooling import POOL_MODES, descriptor_width, pool_descriptors
from .predict import predict_mask, predict_tile_scores
from .train import SupervisionRecord, TrainConfig, TrainState, build_supervision, evaluate_loss, final_loss, train

__all__ = [
    "MLP", "EstimatorParams", "HeadParams", "POOL_MODES", "SupervisionRecord", "TrainConfig", "TrainState",
    "build_supervision", "evaluate_loss", "final_loss",
    "descriptor_width", "distill_loss", "init_params", "loss_and_gradients", "loss_gradients",
    "pool_descriptors", "predict_mask", "predict_scores", "predict_tile_scores",
    "predicted_distribution", "score_gradient", "train",
]
