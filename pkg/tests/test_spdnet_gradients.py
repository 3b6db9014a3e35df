"""Analytic gradients versus central finite differences.

The finite-difference oracle perturbs raw parameter entries; BiMap weights
are treated as unconstrained here because the backward pass reports plain
Euclidean gradients (the optimizer, not the gradient, owns the manifold).
"""

import numpy as np
import pytest

from spdclass.spdnet.model import (
    SpdNetConfig,
    SpdNetModel,
    forward_batch,
    init_model,
    loss_and_grads,
    model_backward,
    weighted_cross_entropy,
)
from synthdata import random_orthogonal, random_spd

FD_STEP = 1e-5
REL_TOL = 1e-4


def loss_of(model, x, labels):
    logits, _ = forward_batch(model, x)
    loss, _ = weighted_cross_entropy(logits, labels, model.class_weights)
    return loss


def fd_gradient(model, x, labels, array):
    """Central differences over every entry of a parameter array (in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + FD_STEP
        up = loss_of(model, x, labels)
        array[idx] = original - FD_STEP
        down = loss_of(model, x, labels)
        array[idx] = original
        grad[idx] = (up - down) / (2.0 * FD_STEP)
    return grad


def max_relative_error(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale))


def spectrum_controlled_spd(rng, n, low=0.5, high=5.0):
    """SPD input with log-spaced, well-separated eigenvalues."""
    lam = np.exp(np.linspace(np.log(low), np.log(high), n))
    q = random_orthogonal(rng, n)
    return (q * lam) @ q.T


def check_all_parameters(model, x, labels):
    _, grads = loss_and_grads(model, x, labels)
    analytic = dict(model.parameters())
    named_grads = dict(
        [(f"bimap{i}.weight", g) for i, g in enumerate(grads.bimap)]
        + [("linear.weight", grads.linear_weight), ("linear.bias", grads.linear_bias)]
    )
    worst = 0.0
    for name, param in analytic.items():
        numeric = fd_gradient(model, x, labels, param)
        worst = max(worst, max_relative_error(named_grads[name], numeric))
    return worst


class TestParameterGradients:
    def test_two_block_model_8x8(self):
        rng = np.random.default_rng(0)
        config = SpdNetConfig(input_dim=8, layer_dims=(4, 2), n_classes=3, seed=0)
        model = init_model(config, class_weights=np.array([1.0, 2.0, 0.5]))
        x = np.stack([spectrum_controlled_spd(rng, 8) for _ in range(4)])
        labels = np.array([0, 1, 2, 1])
        assert check_all_parameters(model, x, labels) <= REL_TOL

    def test_single_block_model(self):
        rng = np.random.default_rng(1)
        config = SpdNetConfig(input_dim=6, layer_dims=(3,), n_classes=2, seed=1)
        model = init_model(config)
        x = np.stack([spectrum_controlled_spd(rng, 6) for _ in range(3)])
        labels = np.array([0, 1, 0])
        assert check_all_parameters(model, x, labels) <= REL_TOL

    def test_gradients_through_the_rectifier_clamp(self):
        # identity-column weights keep the spectrum visible to ReEig, so a
        # floor above some eigenvalues exercises the clamped branch
        rng = np.random.default_rng(2)
        config = SpdNetConfig(
            input_dim=5, layer_dims=(5,), n_classes=2, epsilon_floor=0.05, seed=2
        )
        model = init_model(config)
        model.bimap_weights[0] = np.eye(5)
        lam = np.array([0.01, 0.02, 0.5, 1.0, 3.0])  # two eigenvalues clamped
        q = random_orthogonal(rng, 5)
        x = ((q * lam) @ q.T)[None]
        labels = np.array([1])
        assert check_all_parameters(model, x, labels) <= REL_TOL

    def test_repeated_eigenvalue_input(self):
        # fully degenerate spectrum goes through the divided-difference limit
        config = SpdNetConfig(input_dim=4, layer_dims=(2,), n_classes=2, seed=3)
        model = init_model(config)
        x = (1.7 * np.eye(4))[None]
        labels = np.array([0])
        assert check_all_parameters(model, x, labels) <= REL_TOL

    def test_zero_class_weight_zeroes_gradients(self):
        rng = np.random.default_rng(4)
        config = SpdNetConfig(input_dim=6, layer_dims=(3,), n_classes=2, seed=4)
        model = init_model(config, class_weights=np.array([1.0, 0.0]))
        grads = model_backward(model, random_spd(rng, 6), 1)
        assert all(np.all(g == 0.0) for g in grads.bimap)
        assert np.all(grads.linear_weight == 0.0)
        assert np.all(grads.linear_bias == 0.0)


class TestInputGradient:
    def test_input_gradient_matches_symmetric_directional_derivative(self):
        from spdclass.spdnet.model import backward_from_dlogits
        from spdclass.spdnet.layers import _bimap_vjp, _logeig_vjp, _reeig_vjp

        rng = np.random.default_rng(5)
        config = SpdNetConfig(input_dim=6, layer_dims=(3,), n_classes=2, seed=5)
        model = init_model(config)
        x = spectrum_controlled_spd(rng, 6)
        labels = np.array([1])

        logits, caches = forward_batch(model, x[None])
        _, dlogits = weighted_cross_entropy(logits, labels, model.class_weights)
        # replay the backward chain down to the network input
        features, logeig_cache = caches[-1]
        dy = _logeig_vjp(logeig_cache, dlogits @ model.linear_weight)
        dy = _reeig_vjp(model.config.epsilon_floor, caches[0][1], dy)
        dx, _ = _bimap_vjp(model.bimap_weights[0], caches[0][0], dy)
        dx = dx[0]

        for _ in range(5):
            v = rng.standard_normal((6, 6))
            v = 0.5 * (v + v.T)
            up = loss_of(model, (x + FD_STEP * v)[None], labels)
            down = loss_of(model, (x - FD_STEP * v)[None], labels)
            directional = (up - down) / (2.0 * FD_STEP)
            assert np.isclose(directional, np.sum(dx * v), rtol=1e-4, atol=1e-8)
