"""SPD network assembly: alternating BiMap/ReEig blocks, a log-eigenvalue
head, and a linear classifier, with class-weighted cross-entropy and an
analytic backward pass for every parameter.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, NumericalError
from ..geometry import tangent_dim
from .layers import (
    DEFAULT_EPSILON_FLOOR,
    BiMapLayer,
    _bimap,
    _bimap_vjp,
    _logeig_vjp,
    _logeig_with_cache,
    _reeig_vjp,
    _reeig_with_cache,
)

Array = np.ndarray

SPDNET_MAGIC = b"SPDN"
SPDNET_VERSION = 1


def default_layer_dims(input_dim: int) -> tuple[int, ...]:
    """Halving schedule: d -> ceil(d/2) -> ceil(d/4)."""
    return (max(1, math.ceil(input_dim / 2)), max(1, math.ceil(input_dim / 4)))


@dataclass(frozen=True)
class SpdNetConfig:
    input_dim: int
    layer_dims: tuple[int, ...]
    n_classes: int
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.n_classes < 2:
            raise DataError("need input_dim >= 1 and at least 2 classes")
        dims = tuple(int(d) for d in self.layer_dims)
        if not dims:
            raise DataError("at least one BiMap block is required")
        chain = (self.input_dim,) + dims
        for d_in, d_out in zip(chain, chain[1:]):
            if d_out > d_in or d_out < 1:
                raise DataError(f"layer dims must decrease, got chain {chain}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def feature_dim(self) -> int:
        return tangent_dim(self.layer_dims[-1])


@dataclass
class SpdNetModel:
    config: SpdNetConfig
    bimap_weights: list[Array]  # raw (d_in, d_out) weights, Stiefel by contract
    linear_weight: Array  # (n_classes, feature_dim)
    linear_bias: Array  # (n_classes,)
    class_weights: Array  # (n_classes,)

    def __post_init__(self):
        if len(self.class_weights) != self.config.n_classes:
            raise DataError("class_weights length must equal the class count")
        chain = (self.config.input_dim,) + self.config.layer_dims
        shapes = [w.shape for w in self.bimap_weights]
        if shapes != list(zip(chain, chain[1:])):
            raise DataError(f"BiMap weight shapes {shapes} do not match {chain}")

    def bimap_layers(self) -> list[BiMapLayer]:
        """Validated layer views of the raw weights."""
        return [BiMapLayer(w) for w in self.bimap_weights]

    def parameters(self) -> list[tuple[str, Array]]:
        named = [(f"bimap{i}.weight", w) for i, w in enumerate(self.bimap_weights)]
        return named + [("linear.weight", self.linear_weight), ("linear.bias", self.linear_bias)]

    def copy_weights(self) -> dict[str, Array]:
        return {name: arr.copy() for name, arr in self.parameters()}

    def restore_weights(self, snapshot: dict[str, Array]) -> None:
        self.bimap_weights = [
            snapshot[f"bimap{i}.weight"].copy()
            for i in range(len(self.bimap_weights))
        ]
        self.linear_weight = snapshot["linear.weight"].copy()
        self.linear_bias = snapshot["linear.bias"].copy()


@dataclass
class ModelGrads:
    """Euclidean gradients for every parameter, in model order."""

    bimap: list[Array]
    linear_weight: Array
    linear_bias: Array


def random_stiefel(rng: np.random.Generator, n_in: int, n_out: int) -> Array:
    q, r = np.linalg.qr(rng.standard_normal((n_in, n_out)))
    sign = np.sign(np.diag(r))
    sign[sign == 0.0] = 1.0
    return q * sign


def init_model(
    config: SpdNetConfig,
    class_weights: Array | None = None,
    rng: np.random.Generator | None = None,
) -> SpdNetModel:
    if rng is None:
        rng = np.random.default_rng(config.seed)
    dims = (config.input_dim,) + config.layer_dims
    weights = [random_stiefel(rng, d_in, d_out) for d_in, d_out in zip(dims, dims[1:])]
    p = config.feature_dim
    linear_weight = rng.standard_normal((config.n_classes, p)) / np.sqrt(p)
    linear_bias = np.zeros(config.n_classes)
    if class_weights is None:
        class_weights = np.ones(config.n_classes)
    return SpdNetModel(
        config=config,
        bimap_weights=weights,
        linear_weight=linear_weight,
        linear_bias=np.asarray(linear_bias, dtype=np.float64),
        class_weights=np.asarray(class_weights, dtype=np.float64),
    )


def softmax(logits: Array) -> Array:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(
    logits: Array, labels: Array, class_weights: Array
) -> tuple[float, Array]:
    """Class-weighted mean cross-entropy and its gradient w.r.t. the logits.

    loss = sum_i w_{y_i} * nll_i / sum_i w_{y_i}; an all-zero total weight
    yields zero loss and zero gradient.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    weights = np.asarray(class_weights, dtype=np.float64)
    if np.any(weights < 0.0):
        raise DataError("class weights must be nonnegative")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DataError(f"labels out of range for {k} classes")
    sample_w = weights[labels]
    total = float(sample_w.sum())
    probs = softmax(logits)
    if total == 0.0:
        return 0.0, np.zeros_like(logits)
    z = logits - np.max(logits, axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -log_probs[np.arange(n), labels]
    loss = float(np.sum(sample_w * nll) / total)
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits *= (sample_w / total)[:, None]
    return loss, dlogits


def forward_batch(model: SpdNetModel, x: Array) -> tuple[Array, list]:
    """Logits for a stack (N, d, d), caching intermediates for backward."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[-1] != model.config.input_dim:
        raise DataError(
            f"input dim {x.shape[-1]} != model input dim {model.config.input_dim}"
        )
    caches = []
    current = x
    for w in model.bimap_weights:
        bimap_in = current
        current = _bimap(w, current)
        rectified, eig_cache = _reeig_with_cache(model.config.epsilon_floor, current)
        caches.append((bimap_in, eig_cache))
        current = rectified
    features, logeig_cache = _logeig_with_cache(current)
    logits = features @ model.linear_weight.T + model.linear_bias
    caches.append((features, logeig_cache))
    return (logits[0] if single else logits), caches


def backward_from_dlogits(model: SpdNetModel, caches: list, dlogits: Array) -> ModelGrads:
    features, logeig_cache = caches[-1]
    d_linear_weight = dlogits.T @ features
    d_linear_bias = dlogits.sum(axis=0)
    d_features = dlogits @ model.linear_weight
    dy = _logeig_vjp(logeig_cache, d_features)
    bimap_grads: list[Array] = [None] * len(model.bimap_weights)  # type: ignore[list-item]
    for i in range(len(model.bimap_weights) - 1, -1, -1):
        bimap_in, eig_cache = caches[i]
        dy = _reeig_vjp(model.config.epsilon_floor, eig_cache, dy)
        dy, dw = _bimap_vjp(model.bimap_weights[i], bimap_in, dy)
        bimap_grads[i] = dw
    return ModelGrads(
        bimap=bimap_grads, linear_weight=d_linear_weight, linear_bias=d_linear_bias
    )


def model_forward(model: SpdNetModel, x: Array) -> Array:
    """Class logits for one SPD matrix (or a stack of them)."""
    logits, _ = forward_batch(model, x)
    return logits


def loss_and_grads(
    model: SpdNetModel, x: Array, labels: Array
) -> tuple[float, ModelGrads]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    logits, caches = forward_batch(model, x)
    loss, dlogits = weighted_cross_entropy(logits, labels, model.class_weights)
    return loss, backward_from_dlogits(model, caches, dlogits)


def model_backward(model: SpdNetModel, x: Array, label: int) -> ModelGrads:
    """Parameter gradients of the weighted cross-entropy on one sample."""
    _, grads = loss_and_grads(model, x, np.array([label]))
    return grads


def predict_batch(model: SpdNetModel, x: Array) -> Array:
    logits = model_forward(model, x)
    return np.argmax(np.atleast_2d(logits), axis=-1)


# --- checkpoint serialization ("SPDN" version 1, little-endian) ----------
#
# magic "SPDN" | u32 version | u32 input_dim | u32 n_blocks | blocks x u32
# | u32 n_classes | f64 epsilon_floor | i64 seed | n_classes f64 weights
# | bimap weights | linear weight | linear bias | u8 has_optimizer_state
# (optimizer state is appended by the caller via optim.py when present)


def save_spdnet_checkpoint(model: SpdNetModel, path, optimizer_state=None) -> None:
    from .optim import write_adam_state  # local to avoid a module cycle

    cfg = model.config
    with open(path, "wb") as f:
        f.write(SPDNET_MAGIC)
        f.write(struct.pack("<III", SPDNET_VERSION, cfg.input_dim, len(cfg.layer_dims)))
        f.write(np.asarray(cfg.layer_dims, dtype="<u4").tobytes())
        f.write(struct.pack("<Idq", cfg.n_classes, cfg.epsilon_floor, cfg.seed))
        f.write(np.ascontiguousarray(model.class_weights, dtype="<f8").tobytes())
        for w in model.bimap_weights:
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(model.linear_weight, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(model.linear_bias, dtype="<f8").tobytes())
        f.write(struct.pack("<B", 1 if optimizer_state is not None else 0))
        if optimizer_state is not None:
            write_adam_state(f, optimizer_state)


def _read_exact(f, count: int) -> bytes:
    raw = f.read(count)
    if len(raw) != count:
        raise DataError("truncated checkpoint payload")
    return raw


def _read_f64(f, shape) -> Array:
    count = int(np.prod(shape))
    return np.frombuffer(_read_exact(f, count * 8), dtype="<f8").reshape(shape).copy()


def load_spdnet_checkpoint(path, with_optimizer_state: bool = False):
    from .optim import read_adam_state

    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SPDNET_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}, expected {SPDNET_MAGIC!r}")
        version, input_dim, n_blocks = struct.unpack("<III", _read_exact(f, 12))
        if version != SPDNET_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        dims = tuple(
            int(d) for d in np.frombuffer(_read_exact(f, 4 * n_blocks), dtype="<u4")
        )
        n_classes, eps_floor, seed = struct.unpack("<Idq", _read_exact(f, 20))
        config = SpdNetConfig(
            input_dim=input_dim,
            layer_dims=dims,
            n_classes=n_classes,
            epsilon_floor=eps_floor,
            seed=seed,
        )
        class_weights = _read_f64(f, (n_classes,))
        chain = (input_dim,) + dims
        weights = [_read_f64(f, (d_in, d_out)) for d_in, d_out in zip(chain, chain[1:])]
        linear_weight = _read_f64(f, (n_classes, config.feature_dim))
        linear_bias = _read_f64(f, (n_classes,))
        model = SpdNetModel(
            config=config,
            bimap_weights=weights,
            linear_weight=linear_weight,
            linear_bias=linear_bias,
            class_weights=class_weights,
        )
        (has_state,) = struct.unpack("<B", _read_exact(f, 1))
        state = read_adam_state(f, model) if has_state else None
    if with_optimizer_state:
        return model, state
    return model
