"""Adam adapted to the Stiefel manifold for the BiMap weights.

BiMap gradients are projected onto the tangent space of the Stiefel
manifold before the moment updates, and each update is pulled back onto
the manifold with a QR retraction (R-diagonal signs fixed so the
retraction is deterministic). First moments are re-projected onto the new
tangent space after the retraction instead of parallel-transported
exactly; second moments are entrywise and kept as-is. The linear head
gets standard Adam.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError
from .model import ModelGrads, SpdNetModel

Array = np.ndarray


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8


@dataclass
class RiemannianAdamState:
    step: int
    m_bimap: list[Array]
    v_bimap: list[Array]
    m_linear_weight: Array
    v_linear_weight: Array
    m_linear_bias: Array
    v_linear_bias: Array


def init_adam_state(model: SpdNetModel) -> RiemannianAdamState:
    return RiemannianAdamState(
        step=0,
        m_bimap=[np.zeros_like(w) for w in model.bimap_weights],
        v_bimap=[np.zeros_like(w) for w in model.bimap_weights],
        m_linear_weight=np.zeros_like(model.linear_weight),
        v_linear_weight=np.zeros_like(model.linear_weight),
        m_linear_bias=np.zeros_like(model.linear_bias),
        v_linear_bias=np.zeros_like(model.linear_bias),
    )


def stiefel_tangent_project(w: Array, grad: Array) -> Array:
    """Project a Euclidean gradient onto the tangent space at W."""
    wtg = w.T @ grad
    return grad - w @ (0.5 * (wtg + wtg.T))


def qr_retract(m: Array) -> Array:
    """Nearest-orthonormal pullback via QR with sign-fixed R diagonal."""
    q, r = np.linalg.qr(m)
    sign = np.sign(np.diag(r))
    sign[sign == 0.0] = 1.0
    return q * sign


def _check_finite(name: str, grad: Array, step: int) -> None:
    if not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise NumericalError(
            f"non-finite gradient for {name} at optimizer step {step}: "
            f"{bad}/{grad.size} entries"
        )


def _adam_update(m: Array, v: Array, grad: Array, t: int, cfg: AdamConfig) -> Array:
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1**t)
    v_hat = v / (1.0 - cfg.beta2**t)
    return -cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def riemannian_adam_step(
    state: RiemannianAdamState,
    model: SpdNetModel,
    grads: ModelGrads,
    config: AdamConfig = AdamConfig(),
) -> tuple[SpdNetModel, RiemannianAdamState]:
    """One optimizer step; mutates and returns the model and state."""
    t = state.step + 1
    for i, grad in enumerate(grads.bimap):
        _check_finite(f"bimap{i}.weight", grad, t)
    _check_finite("linear.weight", grads.linear_weight, t)
    _check_finite("linear.bias", grads.linear_bias, t)

    for i, w in enumerate(model.bimap_weights):
        tangent_grad = stiefel_tangent_project(w, grads.bimap[i])
        delta = _adam_update(state.m_bimap[i], state.v_bimap[i], tangent_grad, t, config)
        if not np.any(delta):
            continue  # exact no-op; skip the retraction round-off
        new_w = qr_retract(w + delta)
        if not np.all(np.isfinite(new_w)):
            raise NumericalError(
                f"non-finite bimap{i} weight after retraction at step {t}; "
                "reduce the learning rate"
            )
        state.m_bimap[i] = stiefel_tangent_project(new_w, state.m_bimap[i])
        model.bimap_weights[i] = new_w

    model.linear_weight += _adam_update(
        state.m_linear_weight, state.v_linear_weight, grads.linear_weight, t, config
    )
    model.linear_bias += _adam_update(
        state.m_linear_bias, state.v_linear_bias, grads.linear_bias, t, config
    )
    state.step = t
    return model, state


def write_adam_state(f, state: RiemannianAdamState) -> None:
    f.write(struct.pack("<q", state.step))
    for arr in _state_arrays(state):
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_adam_state(f, model: SpdNetModel) -> RiemannianAdamState:
    from .model import _read_exact, _read_f64  # shared low-level readers

    (step,) = struct.unpack("<q", _read_exact(f, 8))
    state = init_adam_state(model)
    state.step = step
    arrays = [_read_f64(f, arr.shape) for arr in _state_arrays(state)]
    n_blocks = len(model.bimap_weights)
    state.m_bimap = arrays[:n_blocks]
    state.v_bimap = arrays[n_blocks : 2 * n_blocks]
    state.m_linear_weight, state.v_linear_weight = arrays[-4], arrays[-3]
    state.m_linear_bias, state.v_linear_bias = arrays[-2], arrays[-1]
    return state


def _state_arrays(state: RiemannianAdamState) -> list[Array]:
    return (
        state.m_bimap
        + state.v_bimap
        + [
            state.m_linear_weight,
            state.v_linear_weight,
            state.m_linear_bias,
            state.v_linear_bias,
        ]
    )
