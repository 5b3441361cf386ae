"""HU slice -> model input: windowing, bilinear resizing, histogram features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class WindowSpec:
    center: float = 50.0
    width: float = 400.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @property
    def lower(self) -> float:
        return self.center - self.width / 2


@dataclass(frozen=True)
class FeatureConfig:
    bins: int = 32
    grid: int = 2
    resolution: int = 128

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.grid not in (1, 2):
            raise ValueError("grid must be 1 or 2")
        if self.resolution < self.grid:
            raise ValueError("resolution must be at least the grid size")

    @property
    def dim(self) -> int:
        return self.bins * self.grid * self.grid


DEFAULT_WINDOW = WindowSpec()
DEFAULT_FEATURES = FeatureConfig()


def apply_window(hu, window: WindowSpec = DEFAULT_WINDOW) -> np.ndarray:
    """Map HU to [0, 1]: lower window edge -> 0, upper edge -> 1, clamped."""
    hu = np.asarray(hu, dtype=np.float64)
    return np.clip((hu - window.lower) / window.width, 0.0, 1.0)


def resize_bilinear(img, rows: int, cols: int) -> np.ndarray:
    """Bilinear resize sampling source pixels at (i + 0.5) * scale - 0.5.

    Source coordinates are clamped to the image, so edges replicate.  Each
    interpolation step is clamped between its two neighbours, which keeps
    the output inside the input's value range.
    """
    if rows < 1 or cols < 1:
        raise ValueError("target size must be positive")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if img.shape == (rows, cols):
        return img.copy()
    return _kernels.resize_bilinear(img, rows, cols)


def extract_features(img, bins: int = 32, grid: int = 2) -> np.ndarray:
    """Concatenated per-region value histograms of a windowed image.

    The image is cut into grid x grid regions (row-major).  Each region gets
    an L1-normalized histogram over ``bins`` equal bins on [0, 1]; a value on
    a bin edge goes to the upper bin, and 1.0 goes to the last bin.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if grid not in (1, 2):
        raise ValueError("grid must be 1 or 2")
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] < grid or img.shape[1] < grid:
        raise ValueError("image smaller than the region grid")
    return _kernels.region_histograms(img, bins, grid).ravel()


def slice_features(hu, window: WindowSpec = DEFAULT_WINDOW, features: FeatureConfig = DEFAULT_FEATURES):
    """Full per-slice chain: window, resize to the working resolution, histogram."""
    img = apply_window(hu, window)
    img = resize_bilinear(img, features.resolution, features.resolution)
    return extract_features(img, features.bins, features.grid)


def volume_features(volume, indices=None, window: WindowSpec = DEFAULT_WINDOW,
                    features: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Feature matrix for the selected slices of a (n, rows, cols) volume."""
    if indices is None:
        indices = range(volume.shape[0])
    out = np.empty((len(indices), features.dim), dtype=np.float64)
    for row, i in enumerate(indices):
        out[row] = slice_features(volume[i], window, features)
    return out
