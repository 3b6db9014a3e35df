"""Traditional SPD classifiers: nearest Riemannian class mean and LDA in
the tangent space at the global mean.

Both are deterministic. Ties in predicted class are always broken toward
the smallest class id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import (
    karcher_mean_lem,
    lem_distance,
    mat_log,
    tangent_dim,
    tangent_vectorize,
)

Array = np.ndarray

CLASSIC_MAGIC = b"SPDC"
CLASSIC_VERSION = 1
_METHOD_MDRM = 1
_METHOD_TSLDA = 2

DEFAULT_DISCARD_THRESHOLD = 1e11
# Ridge on the pooled within-class covariance; the tangent dimension often
# exceeds per-class sample counts. Falls back to an absolute ridge when the
# pooled covariance is exactly zero (degenerate training set).
LDA_RIDGE_SCALE = 1e-6


def _stack_descriptors(descriptors) -> Array:
    if isinstance(descriptors, np.ndarray) and descriptors.ndim == 3:
        stack = np.asarray(descriptors, dtype=np.float64)
    else:
        items = [np.asarray(m, dtype=np.float64) for m in descriptors]
        if not items:
            raise DataError("no descriptors given")
        dims = {m.shape[-1] for m in items}
        if len(dims) != 1:
            raise DataError(f"descriptors have mixed dimensions {sorted(dims)}")
        stack = np.stack(items)
    if stack.shape[0] == 0:
        raise DataError("no descriptors given")
    if stack.shape[-1] != stack.shape[-2]:
        raise DataError(f"descriptors must be square, got shape {stack.shape}")
    return stack


def _check_labels(labels, n: int) -> Array:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {y.shape}")
    return y.astype(np.int64)


@dataclass
class MdrmModel:
    """One Karcher mean per class; queries go to the nearest mean."""

    class_ids: tuple[int, ...]
    class_means: Array  # (n_classes, dim, dim)

    @property
    def dim(self) -> int:
        return self.class_means.shape[-1]


def mdrm_fit(descriptors, labels) -> MdrmModel:
    x = _stack_descriptors(descriptors)
    y = _check_labels(labels, x.shape[0])
    class_ids = tuple(int(c) for c in np.unique(y))
    if len(class_ids) < 2:
        raise DataError("minimum-distance classifier needs at least 2 classes")
    means = np.stack([karcher_mean_lem(x[y == c]) for c in class_ids])
    return MdrmModel(class_ids=class_ids, class_means=means)


def mdrm_distances(model: MdrmModel, x) -> Array:
    """Distances of one (dim,dim) or many (N,dim,dim) queries to each mean."""
    q = np.asarray(x, dtype=np.float64)
    if q.shape[-1] != model.dim:
        raise DataError(f"query dim {q.shape[-1]} != model dim {model.dim}")
    log_means = mat_log(model.class_means)
    log_q = mat_log(q)
    diff = log_q[..., None, :, :] - log_means
    return np.linalg.norm(diff, axis=(-2, -1))


def mdrm_predict(model: MdrmModel, x) -> tuple[int, dict[int, float]]:
    """Nearest-class-mean label and the full distance map for inspection."""
    d = mdrm_distances(model, x)
    if d.ndim != 1:
        raise DataError("mdrm_predict takes a single matrix; use mdrm_distances")
    winner = model.class_ids[int(np.argmin(d))]  # first minimum: smallest id
    return winner, {c: float(v) for c, v in zip(model.class_ids, d)}


@dataclass
class TsldaModel:
    """Linear discriminant analysis on tangent vectors at the global mean.

    ``coefficients``/``intercepts`` hold the fitted discriminant
    delta_c(v) = v . coef_c + intercept_c with intercept absorbing the
    quadratic term and the log prior. ``within_cov`` (ridged pooled
    covariance) is kept after fit for inspection but not serialized.
    """

    base_point: Array
    class_ids: tuple[int, ...]
    tangent_means: Array  # (n_classes, p)
    coefficients: Array  # (n_classes, p)
    intercepts: Array  # (n_classes,)
    priors: Array  # (n_classes,)
    discard_threshold: float
    within_cov: Array | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.base_point.shape[0]


def _tangent_vectors(base: Array, x: Array) -> Array:
    return tangent_vectorize(mat_log(x) - mat_log(base))


def tslda_fit(
    descriptors, labels, discard_threshold: float = DEFAULT_DISCARD_THRESHOLD
) -> TsldaModel:
    """Fit LDA in the tangent space at the Karcher mean of the training set.

    Samples whose tangent vector contains any entry with absolute value
    above ``discard_threshold`` are dropped before fitting.
    """
    x = _stack_descriptors(descriptors)
    y = _check_labels(labels, x.shape[0])
    class_ids = tuple(int(c) for c in np.unique(y))
    if len(class_ids) < 2:
        raise DataError("tangent-space LDA needs at least 2 classes")

    base = karcher_mean_lem(x)
    vecs = _tangent_vectors(base, x)
    keep = np.max(np.abs(vecs), axis=1) <= discard_threshold
    for c in class_ids:
        if not np.any(keep & (y == c)):
            raise DataError(
                f"class {c} emptied by the tangent-value discard rule "
                f"(threshold {discard_threshold:g})"
            )
    vecs, y_kept = vecs[keep], y[keep]

    n, p = vecs.shape
    k = len(class_ids)
    means = np.stack([vecs[y_kept == c].mean(axis=0) for c in class_ids])
    counts = np.array([np.sum(y_kept == c) for c in class_ids], dtype=np.float64)
    priors = counts / n

    pooled = np.zeros((p, p))
    for idx, c in enumerate(class_ids):
        centered = vecs[y_kept == c] - means[idx]
        pooled += centered.T @ centered
    pooled = pooled / (n - k) if n > k else pooled
    trace = float(np.trace(pooled))
    ridge = LDA_RIDGE_SCALE * trace / p if trace > 0.0 else LDA_RIDGE_SCALE
    within = pooled + ridge * np.eye(p)

    coefficients = np.linalg.solve(within, means.T).T
    intercepts = -0.5 * np.sum(means * coefficients, axis=1) + np.log(priors)
    return TsldaModel(
        base_point=base,
        class_ids=class_ids,
        tangent_means=means,
        coefficients=coefficients,
        intercepts=intercepts,
        priors=priors,
        discard_threshold=float(discard_threshold),
        within_cov=within,
    )


def tslda_scores(model: TsldaModel, x) -> Array:
    """Discriminant scores for one (dim,dim) or many (N,dim,dim) queries."""
    q = np.asarray(x, dtype=np.float64)
    if q.shape[-1] != model.dim:
        raise DataError(f"query dim {q.shape[-1]} != model dim {model.dim}")
    vecs = _tangent_vectors(model.base_point, q)
    return vecs @ model.coefficients.T + model.intercepts


def tslda_predict(model: TsldaModel, x) -> tuple[int, dict[int, float]]:
    scores = tslda_scores(model, x)
    if scores.ndim != 1:
        raise DataError("tslda_predict takes a single matrix; use tslda_scores")
    winner = model.class_ids[int(np.argmax(scores))]  # first maximum
    return winner, {c: float(s) for c, s in zip(model.class_ids, scores)}


# --- checkpoint serialization ("SPDC" version 1, little-endian) ---------
#
# header : magic "SPDC" | u32 version | u8 method | u32 n_classes | u32 dim
# ids    : n_classes x i64 class ids
# mdrm   : n_classes x dim x dim f64 class means, row-major
# tslda  : dim x dim f64 base point | u32 p | f64 discard threshold
#          | (n_classes x p) means | (n_classes x p) coefficients
#          | n_classes f64 intercepts | n_classes f64 priors


def _write_f64(f, arr: Array) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(f, shape) -> Array:
    count = int(np.prod(shape))
    raw = f.read(count * 8)
    if len(raw) != count * 8:
        raise DataError("truncated checkpoint payload")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_classic_checkpoint(model: MdrmModel | TsldaModel, path) -> None:
    if isinstance(model, MdrmModel):
        method = _METHOD_MDRM
    elif isinstance(model, TsldaModel):
        method = _METHOD_TSLDA
    else:
        raise DataError(f"cannot serialize {type(model).__name__}")
    with open(path, "wb") as f:
        f.write(CLASSIC_MAGIC)
        f.write(struct.pack("<IBII", CLASSIC_VERSION, method, len(model.class_ids), model.dim))
        f.write(np.asarray(model.class_ids, dtype="<i8").tobytes())
        if isinstance(model, MdrmModel):
            _write_f64(f, model.class_means)
        else:
            _write_f64(f, model.base_point)
            p = model.tangent_means.shape[1]
            f.write(struct.pack("<Id", p, model.discard_threshold))
            _write_f64(f, model.tangent_means)
            _write_f64(f, model.coefficients)
            _write_f64(f, model.intercepts)
            _write_f64(f, model.priors)


def load_classic_checkpoint(path) -> MdrmModel | TsldaModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CLASSIC_MAGIC:
            raise DataError(f"bad checkpoint magic {magic!r}, expected {CLASSIC_MAGIC!r}")
        version, method, k, dim = struct.unpack("<IBII", f.read(13))
        if version != CLASSIC_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        raw_ids = f.read(k * 8)
        if len(raw_ids) != k * 8:
            raise DataError("truncated checkpoint payload")
        class_ids = tuple(int(c) for c in np.frombuffer(raw_ids, dtype="<i8"))
        if method == _METHOD_MDRM:
            means = _read_f64(f, (k, dim, dim))
            return MdrmModel(class_ids=class_ids, class_means=means)
        if method == _METHOD_TSLDA:
            base = _read_f64(f, (dim, dim))
            p, threshold = struct.unpack("<Id", f.read(12))
            if p != tangent_dim(dim):
                raise DataError(f"inconsistent tangent dimension {p} for dim {dim}")
            means = _read_f64(f, (k, p))
            coefficients = _read_f64(f, (k, p))
            intercepts = _read_f64(f, (k,))
            priors = _read_f64(f, (k,))
            return TsldaModel(
                base_point=base,
                class_ids=class_ids,
                tangent_means=means,
                coefficients=coefficients,
                intercepts=intercepts,
                priors=priors,
                discard_threshold=threshold,
            )
        raise DataError(f"unknown checkpoint method tag {method}")
