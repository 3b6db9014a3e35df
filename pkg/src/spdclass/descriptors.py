"""Covariance descriptors: per-image SPD summaries of feature statistics.

The descriptor is the sample covariance of the per-pixel feature vectors,
plus a ridge ``epsilon * I`` that guarantees positive definiteness when
channels are linearly dependent (constant or perfectly correlated
channels make the raw covariance singular).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BatchError, DataError
from .features import FeatureMap
from .geometry import as_spd

Array = np.ndarray

# Relative ridge applied when no explicit epsilon is given.
DEFAULT_EPSILON_SCALE = 1e-5


@dataclass(frozen=True)
class CovarianceDescriptor:
    """Regularized sample covariance of a feature map, validated SPD."""

    matrix: Array
    sample_count: int
    regularization_epsilon: float
    source: str = "other"

    def __post_init__(self):
        if self.sample_count < 2:
            raise DataError("covariance needs at least 2 pixels")
        if self.regularization_epsilon < 0.0:
            raise DataError("regularization epsilon must be nonnegative")
        object.__setattr__(self, "matrix", as_spd(self.matrix, "descriptor"))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def sample_covariance(fm: FeatureMap) -> Array:
    """Unregularized sample covariance over all pixels (1/(HW-1) normalizer).

    Two-pass accumulation in float64: per-channel mean first, centered
    products second. The result is symmetric but may be singular.
    """
    n = fm.height * fm.width
    if n < 2:
        raise DataError(f"feature map has {n} pixel(s); need at least 2")
    flat = fm.values.reshape(fm.channels, n)
    centered = flat - flat.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / (n - 1)
    return 0.5 * (cov + cov.T)


def default_epsilon(cov: Array) -> float:
    """Scale-robust ridge: a small fraction of the mean channel variance."""
    dim = cov.shape[0]
    return DEFAULT_EPSILON_SCALE * float(np.trace(cov)) / dim


def covariance_descriptor(
    fm: FeatureMap, epsilon: float | None = None
) -> CovarianceDescriptor:
    """Covariance descriptor of a feature map with ridge ``epsilon * I``.

    ``epsilon=None`` applies the relative default. An explicit epsilon of 0
    is honored but fails SPD validation whenever the raw covariance is
    singular.
    """
    cov = sample_covariance(fm)
    eps = default_epsilon(cov) if epsilon is None else float(epsilon)
    if eps < 0.0:
        raise DataError("regularization epsilon must be nonnegative")
    matrix = cov + eps * np.eye(cov.shape[0])
    return CovarianceDescriptor(
        matrix=matrix,
        sample_count=fm.height * fm.width,
        regularization_epsilon=eps,
        source=fm.source,
    )


def batch_descriptors(
    fms: Iterable[FeatureMap] | Sequence[FeatureMap], epsilon: float | None = None
) -> list[CovarianceDescriptor]:
    """Order-preserving covariance_descriptor over a stream of feature maps.

    All items are attempted; failures are aggregated into one BatchError
    carrying the offending indices.
    """
    out: list[CovarianceDescriptor] = []
    failures: list[tuple[int, Exception]] = []
    channels: int | None = None
    for index, fm in enumerate(fms):
        try:
            if channels is None:
                channels = fm.channels
            elif fm.channels != channels:
                raise DataError(
                    f"channel count {fm.channels} differs from first item ({channels})"
                )
            out.append(covariance_descriptor(fm, epsilon))
        except Exception as exc:  # collected, re-raised together
            failures.append((index, exc))
    if failures:
        raise BatchError("descriptor computation failed for some items", failures)
    return out
