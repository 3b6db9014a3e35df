"""Per-pixel feature maps: handcrafted gradient features, windowing, PCA.

The handcrafted map stacks, per pixel: normalized coordinates, absolute
first- and second-order Sobel responses, gradient magnitude, and gradient
orientation (8 channels). Windowing concatenates overlapping square
patches along the channel axis so small images still yield enough feature
channels for a useful covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError

Array = np.ndarray

HC_CHANNELS = 8
HC_CHANNEL_NAMES = ("x", "y", "|dx|", "|dy|", "|dxx|", "|dyy|", "grad_mag", "grad_dir")

# Horizontal-derivative Sobel kernel; the vertical one is its transpose.
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])

SOURCE_TAGS = ("HC", "MedSAM", "DINOv2", "other")


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image with intensities in [0, 1]."""

    intensities: Array

    def __post_init__(self):
        arr = np.asarray(self.intensities, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"gray image must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("gray image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError(
                f"gray image intensities outside [0, 1]: "
                f"[{arr.min():.4g}, {arr.max():.4g}]"
            )
        object.__setattr__(self, "intensities", arr)

    @property
    def height(self) -> int:
        return self.intensities.shape[0]

    @property
    def width(self) -> int:
        return self.intensities.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    """C x H x W stack of per-pixel feature values."""

    values: Array
    source: str = "other"

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise DataError(f"feature map must be C x H x W, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("feature map contains non-finite values")
        if self.source not in SOURCE_TAGS:
            raise DataError(f"unknown feature source {self.source!r}")
        object.__setattr__(self, "values", arr)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class WindowSpec:
    """Square sliding windows: top-left offsets 0, stride, 2*stride, ..."""

    window_size: int
    stride: int
    expected_count: int | None = None

    def __post_init__(self):
        if self.window_size < 1 or self.stride < 1:
            raise DataError("window_size and stride must be positive")


@dataclass(frozen=True)
class PcaModel:
    """Linear projection onto the top principal components."""

    mean: Array
    components: Array  # output_dim x input_dim, orthonormal rows
    explained_variance: Array

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comp = np.asarray(self.components, dtype=np.float64)
        ev = np.asarray(self.explained_variance, dtype=np.float64)
        if comp.ndim != 2 or mean.shape != (comp.shape[1],) or ev.shape != (comp.shape[0],):
            raise DataError("inconsistent PCA model shapes")
        gram = comp @ comp.T
        if np.linalg.norm(gram - np.eye(comp.shape[0])) > 1e-8:
            raise DataError("PCA components are not orthonormal")
        if np.any(np.diff(ev) > 1e-12):
            raise DataError("explained variance must be nonincreasing")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "explained_variance", ev)

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def to_gray(image) -> GrayImage:
    """1- or 3-channel image tensor (C x H x W or H x W) to luminance."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return GrayImage(arr)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise DataError(
            f"expected 1 or 3 channels in C x H x W layout, got shape {arr.shape}"
        )
    if arr.shape[0] == 1:
        return GrayImage(arr[0])
    luma = 0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2]
    return GrayImage(np.clip(luma, 0.0, 1.0))


def _sobel(img: Array, kernel: Array) -> Array:
    # replicate padding at the borders
    return ndimage.correlate(img, kernel, mode="nearest")


def hc_feature_map(img: GrayImage) -> FeatureMap:
    """Handcrafted 8-channel per-pixel feature map of a grayscale image."""
    h, w = img.height, img.width
    if h < 3 or w < 3:
        raise DataError(f"image {h}x{w} is smaller than the 3x3 derivative kernel")
    i = img.intensities
    dx = _sobel(i, SOBEL_X)
    dy = _sobel(i, SOBEL_X.T)
    dxx = _sobel(dx, SOBEL_X)
    dyy = _sobel(dy, SOBEL_X.T)
    grad_mag = np.sqrt(dx * dx + dy * dy)
    grad_dir = np.arctan2(dy, dx)  # atan2(0, 0) == 0
    grad_dir[grad_dir == -np.pi] = np.pi  # keep the range (-pi, pi]
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    x = cols / (w - 1)
    y = rows / (h - 1)
    stack = np.stack(
        [x, y, np.abs(dx), np.abs(dy), np.abs(dxx), np.abs(dyy), grad_mag, grad_dir]
    )
    return FeatureMap(stack, source="HC")


def window_offsets(extent: int, window_size: int, stride: int) -> list[int]:
    """Top-left offsets 0, stride, 2*stride, ... that keep windows in bounds."""
    if window_size > extent:
        raise DataError(f"window size {window_size} exceeds extent {extent}")
    return list(range(0, extent - window_size + 1, stride))


def extract_windows(fm: FeatureMap, spec: WindowSpec) -> FeatureMap:
    """Concatenate overlapping windows along the channel axis.

    Windows are ordered row-major over (row offset, column offset); block k
    of the output channels holds window k. For a 64x64 map with size 21 and
    stride 12 this yields 16 windows.
    """
    if spec.window_size > min(fm.height, fm.width):
        raise DataError(
            f"window size {spec.window_size} does not fit a "
            f"{fm.height}x{fm.width} feature map"
        )
    row_offsets = window_offsets(fm.height, spec.window_size, spec.stride)
    col_offsets = window_offsets(fm.width, spec.window_size, spec.stride)
    count = len(row_offsets) * len(col_offsets)
    if spec.expected_count is not None and count != spec.expected_count:
        raise DataError(
            f"window layout yields {count} windows, expected {spec.expected_count}"
        )
    s = spec.window_size
    blocks = [
        fm.values[:, r : r + s, c : c + s] for r in row_offsets for c in col_offsets
    ]
    return FeatureMap(np.concatenate(blocks, axis=0), source=fm.source)


def pca_fit(samples, output_dim: int) -> PcaModel:
    """Fit a PCA projection to feature vectors (one sample per row).

    Components are the top eigenvectors of the sample covariance, ordered
    by variance, with a deterministic sign: the largest-magnitude entry of
    each component is positive.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"samples must be N x D, got shape {x.shape}")
    n, d = x.shape
    if output_dim < 1 or output_dim > d:
        raise DataError(f"output_dim {output_dim} not in [1, {d}]")
    if n < output_dim + 1:
        raise DataError(
            f"sample covariance of {n} samples has rank at most {max(n - 1, 0)}, "
            f"below the requested {output_dim} components"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:output_dim]
    components = eigenvectors[:, order].T
    explained = np.maximum(eigenvalues[order], 0.0)
    # sign convention: first largest-magnitude entry of each row positive
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def pca_transform_vectors(model: PcaModel, vectors) -> Array:
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise DataError(
            f"vectors have dimension {x.shape[-1]}, model expects {model.input_dim}"
        )
    return (x - model.mean) @ model.components.T


def pca_transform(model: PcaModel, fm: FeatureMap) -> FeatureMap:
    """Project each pixel's feature vector; spatial dimensions unchanged."""
    if fm.channels != model.input_dim:
        raise DataError(
            f"feature map has {fm.channels} channels, model expects {model.input_dim}"
        )
    flat = fm.values.reshape(fm.channels, -1).T
    projected = pca_transform_vectors(model, flat)
    out = projected.T.reshape(model.output_dim, fm.height, fm.width)
    return FeatureMap(out, source=fm.source)
