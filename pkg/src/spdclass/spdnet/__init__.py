"""Manifold-aware neural network over SPD inputs with analytic gradients."""

from .layers import BiMapLayer, ReEigLayer, bimap_forward, logeig_forward, reeig_forward
from .model import (
    ModelGrads,
    SpdNetConfig,
    SpdNetModel,
    default_layer_dims,
    init_model,
    load_spdnet_checkpoint,
    model_backward,
    model_forward,
    save_spdnet_checkpoint,
    weighted_cross_entropy,
)
from .optim import AdamConfig, RiemannianAdamState, init_adam_state, riemannian_adam_step
from .training import TrainConfig, TrainHistory, train

__all__ = [
    "AdamConfig",
    "BiMapLayer",
    "ModelGrads",
    "ReEigLayer",
    "RiemannianAdamState",
    "SpdNetConfig",
    "SpdNetModel",
    "TrainConfig",
    "TrainHistory",
    "bimap_forward",
    "default_layer_dims",
    "init_adam_state",
    "init_model",
    "load_spdnet_checkpoint",
    "logeig_forward",
    "model_backward",
    "model_forward",
    "reeig_forward",
    "riemannian_adam_step",
    "save_spdnet_checkpoint",
    "train",
    "weighted_cross_entropy",
]
