"""Feature grids, flattening conventions and small shared helpers.

Everything is stored row-major as (row, column, channel) in float64.  A grid
cell ``(r, col)`` flattens to row ``r * w + col`` of an ``n x c`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch, ZeroVector

ZERO_NORM = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteValue(f"{what} contains NaN or Inf")
    return a


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """An ``h x w x c`` feature map."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3 or min(a.shape) < 1:
            raise ShapeMismatch(f"feature grid needs shape (h, w, c), got {a.shape}")
        check_finite(a, "feature grid")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class FlatFeatures:
    """``n x c`` matrix, row ``i`` is spatial cell ``i`` in row-major scan order."""

    data: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2 or a.shape[0] != self.height * self.width:
            raise ShapeMismatch(
                f"flat features of shape {a.shape} do not match a "
                f"{self.height}x{self.width} grid"
            )
        object.__setattr__(self, "data", _frozen(a))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64).ravel()
        check_finite(a, "embedding")
        if self.normalized and abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValueError("embedding flagged as normalized does not have unit norm")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def flatten(grid: FeatureGrid) -> FlatFeatures:
    h, w, c = grid.shape
    return FlatFeatures(grid.data.reshape(h * w, c), h, w)


def unflatten(flat: FlatFeatures) -> FeatureGrid:
    return FeatureGrid(flat.data.reshape(flat.height, flat.width, flat.channels))


def l2_normalize(v: EmbeddingVector | np.ndarray) -> EmbeddingVector:
    a = v.data if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm <= ZERO_NORM:
        raise ZeroVector(f"cannot normalize vector with norm {norm:g}")
    return EmbeddingVector(a / norm, normalized=True)


def circular_shift_width(grid: FeatureGrid, offset_columns: int) -> FeatureGrid:
    """Rotate columns so that output column ``j`` is input column ``(j - offset) mod w``."""
    return FeatureGrid(np.roll(grid.data, int(offset_columns), axis=1))


def round_half_away(x: float) -> int:
    return int(np.sign(x) * np.floor(abs(x) + 0.5))


def degrees_to_columns(degrees: float, width: int) -> int:
    """Nearest whole-column shift for a panorama yaw of ``degrees``."""
    return round_half_away(degrees / 360.0 * width)
