"""Evaluation metrics (balanced accuracy, ROC AUC) and report assembly."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

Array = np.ndarray

REPORT_SCHEMA_VERSION = 1

# Per-class probability rows must sum to 1 within this tolerance.
SCORE_SUM_TOL = 1e-6


def _check_pair(labels, predictions) -> tuple[Array, Array]:
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if y.ndim != 1 or y.shape != p.shape or y.size == 0:
        raise DataError("labels and predictions must be equal-length, nonempty 1-D")
    return y, p


def per_class_recall(labels, predictions, n_classes: int | None = None) -> Array:
    """Recall per class; NaN for classes with zero support."""
    y, p = _check_pair(labels, predictions)
    k = int(n_classes) if n_classes is not None else int(y.max()) + 1
    recalls = np.full(k, np.nan)
    for c in range(k):
        mask = y == c
        if np.any(mask):
            recalls[c] = float(np.mean(p[mask] == c))
    return recalls


def balanced_accuracy(labels, predictions, n_classes: int | None = None) -> float:
    """Mean of per-class recalls over the classes present in ``labels``.

    Classes of the declared universe with zero support are excluded with a
    warning.
    """
    recalls = per_class_recall(labels, predictions, n_classes)
    missing = np.isnan(recalls)
    if np.any(missing):
        warnings.warn(
            f"classes {np.flatnonzero(missing).tolist()} have no support; "
            "excluded from balanced accuracy",
            stacklevel=2,
        )
    if np.all(missing):
        raise DataError("no class has support")
    return float(np.mean(recalls[~missing]))


def binary_auc(positive_mask, scores) -> float:
    """ROC AUC from the rank statistic, counting tied pairs as half."""
    mask = np.asarray(positive_mask, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(mask.sum())
    n_neg = int(mask.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("binary AUC needs both positive and negative samples")
    ranks = rankdata(s)  # average ranks resolve ties as half-wins
    u = float(ranks[mask].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc(labels, scores) -> float:
    """ROC AUC from per-class probability rows.

    Binary problems use the positive-class score; multi-class problems
    average one-vs-rest AUCs over the classes present in the labels
    (macro), warning about and skipping absent classes. Returns NaN when
    no class has both positives and negatives.
    """
    y = np.asarray(labels, dtype=np.int64)
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if y.ndim != 1 or s.shape[0] != y.size or y.size == 0:
        raise DataError("labels and scores must align on the sample axis")
    k = s.shape[1]
    if k < 2:
        raise DataError("scores need at least 2 class columns")
    if np.any(y < 0) or np.any(y >= k):
        raise DataError(f"labels out of range for {k} score columns")
    row_sums = s.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > SCORE_SUM_TOL):
        raise DataError("score rows must sum to 1")

    if k == 2:
        try:
            return binary_auc(y == 1, s[:, 1])
        except DataError:
            warnings.warn("only one class present; AUC undefined", stacklevel=2)
            return float("nan")

    values = []
    skipped = []
    for c in range(k):
        mask = y == c
        if not np.any(mask) or np.all(mask):
            skipped.append(c)
            continue
        values.append(binary_auc(mask, s[:, c]))
    if skipped:
        warnings.warn(
            f"classes {skipped} absent from labels; excluded from macro AUC",
            stacklevel=2,
        )
    if not values:
        warnings.warn("no class with both outcomes; AUC undefined", stacklevel=2)
        return float("nan")
    return float(np.mean(values))


def confusion_matrix(labels, predictions, n_classes: int | None = None) -> Array:
    """Counts with true classes along rows and predictions along columns."""
    y, p = _check_pair(labels, predictions)
    k = int(n_classes) if n_classes is not None else int(max(y.max(), p.max())) + 1
    if np.any(p >= k) or np.any(y >= k):
        raise DataError(f"labels or predictions out of range for {k} classes")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (y, p), 1)
    return out


@dataclass(frozen=True)
class EvalReport:
    balanced_accuracy: float
    auc: float
    per_class_recall: Array
    confusion: Array
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "balanced_accuracy": self.balanced_accuracy,
            "auc": None if np.isnan(self.auc) else self.auc,
            "per_class_recall": [
                None if np.isnan(r) else float(r) for r in self.per_class_recall
            ],
            "confusion_matrix": self.confusion.tolist(),
            "sample_count": self.sample_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def format_text(self) -> str:
        lines = [
            f"samples            : {self.sample_count}",
            f"balanced accuracy  : {self.balanced_accuracy:.4f}",
            f"auc                : {self.auc:.4f}",
            "per-class recall   : "
            + ", ".join(
                f"{c}={r:.4f}" if not np.isnan(r) else f"{c}=n/a"
                for c, r in enumerate(self.per_class_recall)
            ),
            "confusion matrix (rows = true class):",
        ]
        width = max(5, len(str(int(self.confusion.max(initial=0)))))
        for row in self.confusion:
            lines.append("  " + " ".join(f"{int(v):>{width}d}" for v in row))
        return "\n".join(lines) + "\n"


def predict_with_scores(model, descriptors) -> tuple[Array, Array, tuple[int, ...]]:
    """Predicted class ids plus per-class probabilities for any fitted model.

    Probabilities come from softmax logits (SPD network), softmax
    discriminants (tangent-space LDA), or softmin of distances (nearest
    Riemannian mean).
    """
    from .classifiers import MdrmModel, TsldaModel, mdrm_distances, tslda_scores
    from .spdnet.model import SpdNetModel, model_forward, softmax

    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if isinstance(model, MdrmModel):
        raw = -mdrm_distances(model, x)
        ids = model.class_ids
    elif isinstance(model, TsldaModel):
        raw = tslda_scores(model, x)
        ids = model.class_ids
    elif isinstance(model, SpdNetModel):
        raw = np.atleast_2d(model_forward(model, x))
        ids = tuple(range(model.config.n_classes))
    else:
        raise DataError(f"cannot evaluate model of type {type(model).__name__}")
    probs = softmax(raw)
    predictions = np.asarray(ids, dtype=np.int64)[np.argmax(raw, axis=1)]
    return predictions, probs, ids


def evaluate(model, descriptors, labels) -> EvalReport:
    """Predict a split and assemble the evaluation report.

    Class ids are mapped to the model's class order; metric columns follow
    that order.
    """
    y = np.asarray(labels, dtype=np.int64)
    predictions, probs, ids = predict_with_scores(model, descriptors)
    if y.shape != predictions.shape:
        raise DataError(f"expected {predictions.shape[0]} labels, got {y.shape}")
    index_of = {c: i for i, c in enumerate(ids)}
    try:
        y_idx = np.array([index_of[int(c)] for c in y], dtype=np.int64)
        p_idx = np.array([index_of[int(c)] for c in predictions], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]} unknown to the model") from None
    k = len(ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        auc_value = auc(y_idx, probs)
    return EvalReport(
        balanced_accuracy=balanced_accuracy(y_idx, p_idx, n_classes=k),
        auc=auc_value,
        per_class_recall=per_class_recall(y_idx, p_idx, n_classes=k),
        confusion=confusion_matrix(y_idx, p_idx, n_classes=k),
        sample_count=int(y.size),
    )
