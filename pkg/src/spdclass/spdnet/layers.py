"""SPD network layers: bilinear compression, eigenvalue rectification, and
the log-eigenvalue head, each with an analytic backward pass.

Backward through the eigen-based layers uses the chain rule for spectral
functions: for Y = Q f(L) Q^T the input gradient is
Q (P o (Q^T dY Q)) Q^T, where P is the matrix of divided differences
P_ij = (f(l_i) - f(l_j)) / (l_i - l_j) with the limit f'((l_i+l_j)/2)
substituted when eigenvalues coincide. That limit removes the
1/(l_i - l_j) singularity at repeated eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from ..errors import DataError, NumericalError
from ..geometry import sym, tangent_unvectorize, tangent_vectorize

Array = np.ndarray

DEFAULT_EPSILON_FLOOR = 1e-4
# Columns of a BiMap weight must stay orthonormal to this tolerance.
STIEFEL_TOL = 1e-6
# Eigenvalue pairs closer than this use the divided-difference limit.
EIGENGAP_TOL = 1e-10


@dataclass(frozen=True)
class BiMapLayer:
    """Learnable compression X -> W^T X W with W on the Stiefel manifold."""

    weight: Array  # (input_dim, output_dim), orthonormal columns

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] > w.shape[0]:
            raise DataError(f"BiMap weight must be tall, got shape {w.shape}")
        gram_gap = np.linalg.norm(w.T @ w - np.eye(w.shape[1]))
        if gram_gap > STIEFEL_TOL:
            raise DataError(
                f"BiMap weight columns not orthonormal (||W^T W - I|| = {gram_gap:.3e})"
            )
        object.__setattr__(self, "weight", w)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class ReEigLayer:
    """Eigenvalue rectification: clamp the spectrum at a positive floor."""

    epsilon_floor: float = DEFAULT_EPSILON_FLOOR

    def __post_init__(self):
        if not self.epsilon_floor > 0.0:
            raise DataError("epsilon_floor must be positive")


class EigCache(NamedTuple):
    eigenvalues: Array  # (..., n), ascending
    eigenvectors: Array  # (..., n, n)


def _eigh_stack(x: Array) -> EigCache:
    try:
        lam, q = np.linalg.eigh(sym(x))
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"eigendecomposition failed on a dim-{x.shape[-1]} layer input"
        ) from exc
    if not np.all(np.isfinite(lam)):
        raise NumericalError("non-finite eigenvalues in a layer input")
    return EigCache(lam, q)


def _loewner(
    lam: Array, fn: Callable[[Array], Array], fn_prime: Callable[[Array], Array]
) -> Array:
    li = lam[..., :, None]
    lj = lam[..., None, :]
    diff = li - lj
    near = np.abs(diff) < EIGENGAP_TOL
    quotient = (fn(li) - fn(lj)) / np.where(near, 1.0, diff)
    return np.where(near, fn_prime(0.5 * (li + lj)), quotient)


def _spectral_vjp(cache: EigCache, dy: Array, fn, fn_prime) -> Array:
    lam, q = cache
    p = _loewner(lam, fn, fn_prime)
    inner = np.swapaxes(q, -1, -2) @ sym(dy) @ q
    return sym(q @ (p * inner) @ np.swapaxes(q, -1, -2))


# --- BiMap ---------------------------------------------------------------


def _bimap(w: Array, x: Array) -> Array:
    return np.swapaxes(w, 0, 1) @ x @ w


def bimap_forward(layer: BiMapLayer, x: Array) -> Array:
    """W^T X W; SPD for SPD input because W has full column rank."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.input_dim:
        raise DataError(
            f"BiMap expects dim {layer.input_dim}, got {x.shape[-1]}"
        )
    return _bimap(layer.weight, x)


def _bimap_vjp(w: Array, x: Array, dy: Array) -> tuple[Array, Array]:
    """Gradients of <dY, W^T X W> for symmetric X and dY.

    Returns (dX, dW); for stacked inputs dW sums over the stack.
    """
    dy = sym(dy)
    dx = w @ dy @ np.swapaxes(w, 0, 1)
    dw = 2.0 * np.asarray(x @ (w @ dy))
    if dw.ndim == 3:
        dw = dw.sum(axis=0)
    return dx, dw


# --- ReEig ---------------------------------------------------------------


def _reeig_fn(eps: float):
    return lambda lam: np.maximum(lam, eps)


def _reeig_prime(eps: float):
    return lambda lam: (lam > eps).astype(np.float64)


def _reeig_with_cache(eps: float, x: Array) -> tuple[Array, EigCache]:
    cache = _eigh_stack(x)
    lam_clamped = np.maximum(cache.eigenvalues, eps)
    q = cache.eigenvectors
    y = sym((q * lam_clamped[..., None, :]) @ np.swapaxes(q, -1, -2))
    return y, cache


def reeig_forward(layer: ReEigLayer, x: Array) -> Array:
    """Clamp eigenvalues at the floor; identity when lambda_min >= floor."""
    y, _ = _reeig_with_cache(layer.epsilon_floor, np.asarray(x, dtype=np.float64))
    return y


def _reeig_vjp(eps: float, cache: EigCache, dy: Array) -> Array:
    return _spectral_vjp(cache, dy, _reeig_fn(eps), _reeig_prime(eps))


# --- LogEig head ---------------------------------------------------------


def _logeig_with_cache(x: Array) -> tuple[Array, EigCache]:
    cache = _eigh_stack(x)
    lam, q = cache
    if np.any(lam <= 0.0):
        raise DataError(
            f"log-eigenvalue head requires positive eigenvalues, got min "
            f"{float(np.min(lam)):.3e}"
        )
    log_mat = sym((q * np.log(lam)[..., None, :]) @ np.swapaxes(q, -1, -2))
    return tangent_vectorize(log_mat), cache


def logeig_forward(x: Array) -> Array:
    """Isometric vectorization of the matrix logarithm."""
    v, _ = _logeig_with_cache(np.asarray(x, dtype=np.float64))
    return v


def _logeig_vjp(cache: EigCache, dv: Array) -> Array:
    dt = tangent_unvectorize(dv)
    return _spectral_vjp(cache, dt, np.log, lambda lam: 1.0 / lam)
