"""Mini-batch training loop with early stopping on validation balanced
accuracy. Deterministic for a fixed seed: one generator, seeded once,
drives both weight initialization and epoch shuffling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data import class_weight_vector
from ..errors import DataError
from ..metrics import balanced_accuracy
from .layers import DEFAULT_EPSILON_FLOOR
from .model import (
    SpdNetConfig,
    SpdNetModel,
    default_layer_dims,
    init_model,
    loss_and_grads,
    predict_batch,
)
from .optim import AdamConfig, init_adam_state, riemannian_adam_step

Array = np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 32
    learning_rate: float = 1e-2
    patience: int = 20
    min_delta: float = 1e-4
    seed: int = 0
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR
    layer_dims: tuple[int, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.99
    adam_epsilon: float = 1e-8


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_balanced_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based epoch with the best validation metric

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def _check_split(x: Array, y: Array, name: str) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 3 or x.shape[0] == 0:
        raise DataError(f"{name} split must be a nonempty (N, d, d) stack")
    if y.shape != (x.shape[0],):
        raise DataError(f"{name} labels must match the {x.shape[0]} samples")
    if np.any(y < 0):
        raise DataError(f"{name} labels must be nonnegative")
    return x, y


def train(
    train_x,
    train_y,
    val_x,
    val_y,
    config: TrainConfig = TrainConfig(),
    class_weights: Array | None = None,
) -> tuple[SpdNetModel, TrainHistory]:
    """Train on the train split, early-stop on the validation split, and
    return the best-validation model plus the per-epoch history."""
    train_x, train_y = _check_split(train_x, train_y, "train")
    val_x, val_y = _check_split(val_x, val_y, "validation")
    n_classes = int(max(train_y.max(), val_y.max())) + 1
    if np.unique(train_y).size < 2:
        raise DataError("training data contains a single class")

    if class_weights is None:
        class_weights = class_weight_vector(train_y, n_classes)

    dim = train_x.shape[-1]
    net_config = SpdNetConfig(
        input_dim=dim,
        layer_dims=config.layer_dims or default_layer_dims(dim),
        n_classes=n_classes,
        epsilon_floor=config.epsilon_floor,
        seed=config.seed,
    )
    rng = np.random.default_rng(config.seed)
    model = init_model(net_config, class_weights=class_weights, rng=rng)
    state = init_adam_state(model)
    adam = AdamConfig(
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.adam_epsilon,
    )

    history = TrainHistory()
    best_metric = -np.inf
    best_weights = model.copy_weights()
    epochs_since_improvement = 0

    n = train_x.shape[0]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        weight_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(model, train_x[idx], train_y[idx])
            riemannian_adam_step(state, model, grads, adam)
            batch_weight = float(class_weights[train_y[idx]].sum())
            loss_sum += loss * batch_weight
            weight_sum += batch_weight
        epoch_loss = loss_sum / weight_sum if weight_sum > 0.0 else 0.0
        val_metric = balanced_accuracy(val_y, predict_batch(model, val_x))
        history.train_loss.append(epoch_loss)
        history.val_balanced_accuracy.append(val_metric)

        if val_metric > best_metric + config.min_delta:
            best_metric = val_metric
            best_weights = model.copy_weights()
            history.best_epoch = epoch
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
        if epochs_since_improvement >= config.patience:
            break

    model.restore_weights(best_weights)
    return model, history
