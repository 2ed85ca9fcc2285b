"""Vector arithmetic shared by the index and the network: L1 distance, mean,
unit-L2 normalization, validation.

Feature vectors are plain read-only ``float64`` numpy arrays; the helpers
here are the only place that validates them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DimensionError, EmptyGalleryError

DEFAULT_DIMENSION = 256


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def feature_vector(values: Iterable[float], dimension: int | None = None) -> np.ndarray:
    """Validate ``values`` as a feature vector and return a read-only copy.

    Entries must be finite and nonnegative. If ``dimension`` is given the
    length must match it.
    """
    v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                   dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"feature vector must be a nonempty 1-D sequence, got shape {v.shape}")
    if dimension is not None and v.size != dimension:
        raise DimensionError(f"expected dimension {dimension}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature vector entries must be finite")
    if np.any(v < 0):
        raise ValueError("feature vector entries must be nonnegative")
    return _frozen(v)


@dataclass(frozen=True, eq=False)
class MeanVector:
    values: np.ndarray
    source_count: int

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.ndim != 1 or not np.all(np.isfinite(self.values)):
            raise ValueError("mean vector must be a finite 1-D array")
        if self.source_count < 1:
            raise ValueError("source_count must be positive")

    @property
    def dimension(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, MeanVector):
            return NotImplemented
        return (self.source_count == other.source_count
                and np.array_equal(self.values, other.values))

    __hash__ = None


def l1_distance(x: Sequence[float], y: Sequence[float]) -> float:
    """Sum of absolute coordinate differences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(np.abs(x - y).sum())


def l1_distances(rows: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Row-wise L1 distance from each row of ``rows`` to ``point``."""
    rows = np.asarray(rows, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != point.shape[-1]:
        raise DimensionError(f"dimension mismatch: {rows.shape} vs {point.shape}")
    return np.abs(rows - point).sum(axis=1)


def mean_vector(vectors) -> MeanVector:
    """Coordinate-wise arithmetic mean of a nonempty collection of vectors."""
    vectors = list(vectors) if not isinstance(vectors, np.ndarray) else vectors
    if len(vectors) == 0:
        raise EmptyGalleryError("cannot take the mean of an empty set")
    dims = {np.asarray(v).shape for v in vectors}
    if len(dims) != 1:
        raise DimensionError(f"mixed dimensions: {sorted(dims)}")
    stacked = np.asarray(vectors, dtype=np.float64)
    return MeanVector(stacked.mean(axis=0), source_count=stacked.shape[0])


def normalize(x: Sequence[float]) -> np.ndarray:
    """Scale ``x`` to unit L2 length."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x)
    if n == 0.0 or not np.isfinite(n):
        raise DegenerateVectorError("cannot normalize an all-zero vector")
    return _frozen(x / n)


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("cannot normalize an all-zero vector")
    return rows / norms
