"""Log-Euclidean geometry on symmetric positive definite (SPD) matrices.

All functions work on plain float64 ndarrays and accept stacked inputs
``(..., n, n)`` wherever that is free. ``as_spd`` is the canonical
constructor: it symmetrizes and validates, and everything downstream may
assume its output. All operations are pure; nothing here holds state.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, NotSpdError, NumericalError

Array = np.ndarray

# Tolerances calibrated for float64 at dimensions up to ~1024.
SYMMETRY_RTOL = 1e-10
# lambda_min must exceed this fraction of lambda_max for a matrix to
# count as SPD; a relative floor scales with descriptor magnitude.
SPD_RELATIVE_FLOOR = 1e-12
# exp() overflows float64 just above 709; reject earlier with a clear error.
EXP_EIGENVALUE_LIMIT = 700.0


class SymEigen(NamedTuple):
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""

    eigenvalues: Array
    eigenvectors: Array  # orthonormal columns, one per eigenvalue


def sym(m: Array) -> Array:
    """Symmetric part (m + m^T)/2, over the trailing two axes."""
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _as_square(m, name: str = "matrix") -> Array:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DataError(f"{name} must be square, got shape {a.shape}")
    if a.shape[-1] < 1:
        raise DataError(f"{name} must have positive dimension")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite values")
    return a


def is_symmetric(m: Array, rtol: float = SYMMETRY_RTOL) -> bool:
    a = np.asarray(m, dtype=np.float64)
    gap = np.abs(a - np.swapaxes(a, -1, -2))
    return bool(np.all(gap <= rtol * np.maximum(1.0, np.abs(a))))


def require_symmetric(m, name: str = "matrix") -> Array:
    """Validate symmetry and return a float64 copy of the symmetric part."""
    a = _as_square(m, name)
    if not is_symmetric(a):
        raise DataError(f"{name} is not symmetric within tolerance {SYMMETRY_RTOL}")
    return sym(a)


def as_spd(m, name: str = "matrix") -> Array:
    """Construct a validated SPD matrix: symmetrize, then check the spectrum.

    Raises NotSpdError unless lambda_min > SPD_RELATIVE_FLOOR * lambda_max.
    """
    a = sym(_as_square(m, name))
    w = _eigvalsh(a)
    w_min = w[..., 0]
    w_max = w[..., -1]
    if np.any(w_max <= 0.0) or np.any(w_min <= SPD_RELATIVE_FLOOR * w_max):
        raise NotSpdError(
            f"{name} is not positive definite: eigenvalue range "
            f"[{float(np.min(w_min)):.6e}, {float(np.max(w_max)):.6e}]"
        )
    return a


def _condition_estimate(m: Array) -> float:
    try:
        return float(np.linalg.cond(m))
    except np.linalg.LinAlgError:
        return float("inf")


def _eigh(m: Array) -> tuple[Array, Array]:
    try:
        return np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"symmetric eigendecomposition failed for dim {m.shape[-1]} "
            f"(condition estimate {_condition_estimate(m):.3e})"
        ) from exc


def _eigvalsh(m: Array) -> Array:
    try:
        return np.linalg.eigvalsh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"symmetric eigenvalue computation failed for dim {m.shape[-1]} "
            f"(condition estimate {_condition_estimate(m):.3e})"
        ) from exc


def sym_eig(m) -> SymEigen:
    """Eigendecomposition of a symmetric matrix; eigenvalues ascending."""
    a = sym(_as_square(m))
    w, q = _eigh(a)
    return SymEigen(w, q)


def mat_log(a) -> Array:
    """Matrix logarithm of an SPD matrix (symmetric result)."""
    x = sym(_as_square(a))
    w, q = _eigh(x)
    w_min, w_max = w[..., 0], w[..., -1]
    if np.any(w_max <= 0.0) or np.any(w_min <= SPD_RELATIVE_FLOOR * w_max):
        raise NotSpdError(
            "matrix logarithm requires a positive definite input: eigenvalue "
            f"range [{float(np.min(w_min)):.6e}, {float(np.max(w_max)):.6e}]"
        )
    return sym(np.einsum("...ij,...j,...kj->...ik", q, np.log(w), q))


def mat_exp(s) -> Array:
    """Matrix exponential of a symmetric matrix (SPD result)."""
    x = sym(_as_square(s))
    w, q = _eigh(x)
    if np.any(w > EXP_EIGENVALUE_LIMIT):
        raise NumericalError(
            f"matrix exponential overflow: eigenvalue {float(np.max(w)):.3e} "
            f"exceeds {EXP_EIGENVALUE_LIMIT}"
        )
    return sym(np.einsum("...ij,...j,...kj->...ik", q, np.exp(w), q))


def _check_same_dim(a: Array, b: Array) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DataError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def lem_distance(a, b) -> float | Array:
    """Log-Euclidean distance ||log(a) - log(b)||_F."""
    x = _as_square(a)
    y = _as_square(b)
    _check_same_dim(x, y)
    d = np.linalg.norm(mat_log(x) - mat_log(y), axis=(-2, -1))
    return float(d) if d.ndim == 0 else d

def karcher_mean_lem(mats: Sequence[Array] | Array) -> Array:
    """Karcher (Frechet) mean under the log-Euclidean metric.

    The metric is flat in log-space, so the minimizer of the sum of
    squared distances has the closed form exp(mean(log(A_i))).
    """
    if isinstance(mats, np.ndarray) and mats.ndim >= 3:
        stack = mats
    else:
        items = list(mats)
        if not items:
            raise DataError("karcher_mean_lem requires a nonempty set")
        dims = {np.shape(m)[-1] for m in items}
        if len(dims) != 1:
            raise DataError(f"karcher_mean_lem: mixed dimensions {sorted(dims)}")
        stack = np.stack([np.asarray(m, dtype=np.float64) for m in items])
    if stack.shape[0] == 0:
        raise DataError("karcher_mean_lem requires a nonempty set")
    return mat_exp(np.mean(mat_log(stack), axis=0))


def log_map(base, a) -> Array:
    """Tangent coordinates of ``a`` at ``base``: log(a) - log(base)."""
    x = _as_square(base, "base")
    y = _as_square(a)
    _check_same_dim(x, y)
    return mat_log(y) - mat_log(x)


def exp_map(base, t) -> Array:
    """Inverse of log_map at the same base: exp(log(base) + t)."""
    x = _as_square(base, "base")
    v = require_symmetric(t, "tangent vector")
    _check_same_dim(x, v)
    return mat_exp(mat_log(x) + v)


def tangent_dim(n: int) -> int:
    """Length of the half-vectorization of an n x n symmetric matrix."""
    return n * (n + 1) // 2


def _vech_coefficients(n: int) -> tuple[tuple[Array, Array], Array]:
    rows, cols = np.triu_indices(n)
    coeff = np.where(rows == cols, 1.0, np.sqrt(2.0))
    return (rows, cols), coeff


def tangent_vectorize(t) -> Array:
    """Isometric half-vectorization of a symmetric matrix.

    Upper triangle in row-major order, off-diagonal entries scaled by
    sqrt(2) so the Euclidean norm of the vector equals ||t||_F.
    """
    x = sym(_as_square(t))
    (rows, cols), coeff = _vech_coefficients(x.shape[-1])
    return coeff * x[..., rows, cols]


def tangent_unvectorize(v) -> Array:
    """Inverse of tangent_vectorize."""
    vec = np.asarray(v, dtype=np.float64)
    p = vec.shape[-1]
    n = int(round((np.sqrt(1.0 + 8.0 * p) - 1.0) / 2.0))
    if tangent_dim(n) != p:
        raise DataError(f"vector length {p} is not a triangular number")
    (rows, cols), coeff = _vech_coefficients(n)
    out = np.zeros(vec.shape[:-1] + (n, n), dtype=np.float64)
    out[..., rows, cols] = vec / coeff
    out[..., cols, rows] = out[..., rows, cols]
    return out
