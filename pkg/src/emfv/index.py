"""Banded distance-to-mean index.

Every enrolled person owns one closed band ``[low, high]`` of L1 distances
from the gallery mean. Bands are kept sorted and pairwise disjoint, so a
probe is classified by one binary search over the bands: it either lands
inside a band, or falls in a gap and is assigned to the nearer neighbour.
A probe exactly between two neighbours (within ``tie_tolerance``) is
reported as an ambiguous tie and never resolved silently.
"""
from __future__ import annotations

import bisect
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from .core import MeanVector, l1_distances, mean_vector, normalize_rows
from .errors import (
    BandCollisionError,
    DimensionError,
    DuplicatePersonError,
    EmptyGalleryError,
    UnknownPersonError,
)

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.05
# absolute half-width for persons whose sample distances have zero spread
DEFAULT_EPSILON = 0.02
# absorbs float rounding when comparing the two gaps around a probe
DEFAULT_TIE_TOLERANCE = 1e-9


class Outcome(enum.Enum):
    IN_BAND = "in_band"
    NEAREST_BAND = "nearest_band"
    AMBIGUOUS_TIE = "ambiguous_tie"
    EMPTY_INDEX = "empty_index"


class MeanPolicy(enum.Enum):
    FROZEN = "frozen"
    RECOMPUTE = "recompute"


@dataclass(frozen=True)
class Band:
    person: str
    low: float
    high: float

    def __post_init__(self):
        if not isinstance(self.person, str) or not self.person:
            raise ValueError("person id must be a non-empty string")
        low, high = float(self.low), float(self.high)
        if not (np.isfinite(low) and np.isfinite(high)):
            raise ValueError("band endpoints must be finite")
        if not 0.0 <= low <= high:
            raise ValueError(f"invalid band [{low}, {high}] for {self.person!r}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    def contains(self, d: float) -> bool:
        return self.low <= d <= self.high


class ClassificationResult(NamedTuple):
    """Outcome of one lookup; ``gap`` is the interval distance to the named band(s)."""

    outcome: Outcome
    persons: tuple[str, ...]
    distance: float
    gap: float = 0.0

    @property
    def person(self) -> str | None:
        return self.persons[0] if self.persons else None


def find_overlaps(bands: Iterable[Band]) -> list[tuple[str, str]]:
    """Person pairs whose closed bands intersect (sweep over sorted lows)."""
    ordered = sorted(bands, key=lambda b: (b.low, b.high, b.person))
    pairs = []
    active: list[Band] = []
    for b in ordered:
        active = [a for a in active if a.high >= b.low]
        pairs.extend((a.person, b.person) for a in active)
        active.append(b)
    return pairs


@dataclass(frozen=True, eq=False)
class Gallery:
    """Per-person enrollment vectors, stored unit-L2 normalized."""

    dimension: int
    samples: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for person, rows in self.samples.items():
            if not isinstance(person, str) or not person:
                raise ValueError("person id must be a non-empty string")
            rows = np.array(rows, dtype=np.float64)
            if rows.ndim != 2 or rows.shape[0] == 0:
                raise EmptyGalleryError(f"person {person!r} has no samples")
            if rows.shape[1] != self.dimension:
                raise DimensionError(
                    f"person {person!r}: dimension {rows.shape[1]} != {self.dimension}")
            rows.setflags(write=False)
            frozen[person] = rows
        object.__setattr__(self, "samples", MappingProxyType(frozen))

    @classmethod
    def from_raw(cls, samples: Mapping[str, Iterable], dimension: int | None = None) -> "Gallery":
        """Build a gallery from unnormalized vectors."""
        prepared = {p: _prepare(rows, dimension) for p, rows in samples.items()}
        if dimension is None:
            if not prepared:
                raise EmptyGalleryError("cannot infer dimension of an empty gallery")
            dimension = next(iter(prepared.values())).shape[1]
        return cls(dimension, prepared)

    @property
    def persons(self) -> list[str]:
        return list(self.samples)

    def __len__(self):
        return len(self.samples)

    def __contains__(self, person):
        return person in self.samples

    def all_vectors(self) -> np.ndarray:
        if not self.samples:
            return np.empty((0, self.dimension))
        return np.concatenate(list(self.samples.values()))

    def with_person(self, person: str, rows: np.ndarray) -> "Gallery":
        if person in self.samples:
            raise DuplicatePersonError(f"person {person!r} already enrolled")
        return Gallery(self.dimension, {**self.samples, person: rows})

    def __eq__(self, other):
        if not isinstance(other, Gallery):
            return NotImplemented
        return (self.dimension == other.dimension
                and list(self.samples) == list(other.samples)
                and all(np.array_equal(self.samples[p], other.samples[p]) for p in self.samples))

    __hash__ = None


def _prepare(rows, dimension: int | None) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None, :]
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyGalleryError("at least one sample is required")
    if dimension is not None and rows.shape[1] != dimension:
        raise DimensionError(f"expected dimension {dimension}, got {rows.shape[1]}")
    if not np.all(np.isfinite(rows)) or np.any(rows < 0):
        raise ValueError("feature vectors must be finite and nonnegative")
    return normalize_rows(rows)


@dataclass(frozen=True, eq=False)
class BandedIndex:
    mean: MeanVector
    bands: tuple[Band, ...]
    dimension: int
    version: int = 1
    margin: float = DEFAULT_MARGIN
    epsilon: float = DEFAULT_EPSILON
    tie_tolerance: float = DEFAULT_TIE_TOLERANCE

    def __post_init__(self):
        if self.mean.dimension != self.dimension:
            raise DimensionError(f"mean has dimension {self.mean.dimension}, index {self.dimension}")
        bands = tuple(sorted(self.bands, key=lambda b: b.low))
        ids = [b.person for b in bands]
        if len(set(ids)) != len(ids):
            raise DuplicatePersonError("a person may own only one band")
        overlaps = find_overlaps(bands)
        if overlaps:
            raise BandCollisionError(overlaps)
        if self.margin < 0 or self.epsilon < 0 or self.tie_tolerance < 0:
            raise ValueError("margin, epsilon and tie_tolerance must be nonnegative")
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "_by_person", {b.person: b for b in bands})
        object.__setattr__(self, "_lows", [b.low for b in bands])
        object.__setattr__(self, "_highs", [b.high for b in bands])
        object.__setattr__(self, "_ids", ids)

    @property
    def persons(self) -> list[str]:
        return [b.person for b in self.bands]

    def band_for(self, person: str) -> Band:
        try:
            return self._by_person[person]
        except KeyError:
            raise UnknownPersonError(f"person {person!r} is not enrolled") from None

    def __len__(self):
        return len(self.bands)

    def __contains__(self, person):
        return person in self._by_person

    def distances(self, probes) -> np.ndarray:
        """Distance-to-mean for each row of ``probes`` (assumed normalized)."""
        probes = np.asarray(probes, dtype=np.float64)
        if probes.ndim == 1:
            probes = probes[None, :]
        if probes.ndim != 2 or probes.shape[1] != self.dimension:
            raise DimensionError(f"probe dimension {probes.shape[-1]} != {self.dimension}")
        return l1_distances(probes, self.mean.values)

    def distance(self, probe) -> float:
        return float(self.distances(probe)[0])

    def min_gap(self) -> float:
        """Smallest distance between neighbouring bands; inf for fewer than two."""
        if len(self.bands) < 2:
            return float("inf")
        return min(b.low - a.high for a, b in zip(self.bands, self.bands[1:]))

    def __eq__(self, other):
        if not isinstance(other, BandedIndex):
            return NotImplemented
        return (self.mean == other.mean and self.bands == other.bands
                and self.dimension == other.dimension and self.version == other.version
                and self.margin == other.margin and self.epsilon == other.epsilon
                and self.tie_tolerance == other.tie_tolerance)

    __hash__ = None


def band_from_distances(person: str, distances, margin: float = DEFAULT_MARGIN,
                        epsilon: float = DEFAULT_EPSILON) -> Band:
    lo, hi = float(np.min(distances)), float(np.max(distances))
    width = hi - lo
    if width == 0.0:
        return Band(person, max(0.0, lo - epsilon), hi + epsilon)
    return Band(person, max(0.0, lo - margin * width), hi + margin * width)


def build_index(gallery: Gallery, margin: float = DEFAULT_MARGIN, *,
                epsilon: float = DEFAULT_EPSILON,
                tie_tolerance: float = DEFAULT_TIE_TOLERANCE,
                version: int = 1) -> BandedIndex:
    """Compute the gallery mean and one band per person.

    Raises BandCollisionError if any two bands intersect.
    """
    if len(gallery) == 0:
        raise EmptyGalleryError("cannot build an index from an empty gallery")
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    mean = mean_vector(gallery.all_vectors())
    bands = [band_from_distances(p, l1_distances(rows, mean.values), margin, epsilon)
             for p, rows in gallery.samples.items()]
    idx = BandedIndex(mean, tuple(bands), gallery.dimension, version=version, margin=margin,
                      epsilon=epsilon, tie_tolerance=tie_tolerance)
    log.info("built index v%d: %d persons, dimension %d", version, len(bands), gallery.dimension)
    return idx


def _search(idx: BandedIndex, d: float):
    """Binary search over sorted disjoint bands, counting interval comparisons.

    This is the instrumented search behind :func:`lookup_cost`; lookups
    themselves go through :func:`_locate`. Returns ``(outcome, left, right, comparisons)`` where ``left``/``right``
    are band positions: the containing band for IN_BAND, otherwise the
    neighbours chosen or tied.
    """
    if not math.isfinite(d):
        raise ValueError("distance must be finite")
    lows, highs = idx._lows, idx._highs
    n = len(lows)
    lo, hi, comps = 0, n, 0
    if n == 0:
        return Outcome.EMPTY_INDEX, None, None, 0
    while lo < hi:
        mid = (lo + hi) // 2
        comps += 1
        if d < lows[mid]:
            hi = mid
        elif d > highs[mid]:
            lo = mid + 1
        else:
            return Outcome.IN_BAND, mid, mid, comps
    left, right = lo - 1, lo
    if left < 0:
        return Outcome.NEAREST_BAND, right, right, comps
    if right >= n:
        return Outcome.NEAREST_BAND, left, left, comps
    comps += 1
    gap_left, gap_right = d - highs[left], lows[right] - d
    if abs(gap_left - gap_right) <= idx.tie_tolerance:
        return Outcome.AMBIGUOUS_TIE, left, right, comps
    pick = left if gap_left < gap_right else right
    return Outcome.NEAREST_BAND, pick, pick, comps


def _locate(idx: BandedIndex, d: float):
    """Same contract as :func:`_search` minus the counter, using C bisection."""
    if not math.isfinite(d):
        raise ValueError("distance must be finite")
    lows, highs = idx._lows, idx._highs
    n = len(lows)
    if n == 0:
        return Outcome.EMPTY_INDEX, None, None
    left = bisect.bisect_right(lows, d) - 1
    if left >= 0 and d <= highs[left]:
        return Outcome.IN_BAND, left, left
    right = left + 1
    if left < 0:
        return Outcome.NEAREST_BAND, right, right
    if right >= n:
        return Outcome.NEAREST_BAND, left, left
    gap_left, gap_right = d - highs[left], lows[right] - d
    if abs(gap_left - gap_right) <= idx.tie_tolerance:
        return Outcome.AMBIGUOUS_TIE, left, right
    pick = left if gap_left < gap_right else right
    return Outcome.NEAREST_BAND, pick, pick


def _gap(band: Band, d: float) -> float:
    if d < band.low:
        return band.low - d
    if d > band.high:
        return d - band.high
    return 0.0


def classify_distance(idx: BandedIndex, d: float) -> ClassificationResult:
    outcome, i, j = _locate(idx, d)
    if outcome is Outcome.EMPTY_INDEX:
        return ClassificationResult(outcome, (), d)
    if outcome is Outcome.IN_BAND:
        return ClassificationResult(outcome, (idx.bands[i].person,), d)
    if outcome is Outcome.NEAREST_BAND:
        band = idx.bands[i]
        return ClassificationResult(outcome, (band.person,), d, _gap(band, d))
    a, b = idx.bands[i], idx.bands[j]
    return ClassificationResult(outcome, tuple(sorted((a.person, b.person))), d,
                                min(_gap(a, d), _gap(b, d)))


def classify(idx: BandedIndex, probe) -> ClassificationResult:
    """Classify a normalized probe vector by its distance to the index mean."""
    return classify_distance(idx, idx.distance(probe))


def lookup_cost_distance(idx: BandedIndex, d: float) -> int:
    return _search(idx, d)[3]


def lookup_cost(idx: BandedIndex, probe) -> int:
    """Number of interval comparisons classify performs for ``probe``."""
    return lookup_cost_distance(idx, idx.distance(probe))


def identify_distance(idx: BandedIndex, d: float, max_neighbors: int = 3) -> list[tuple[str, float]]:
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be positive")
    outcome, i, j = _locate(idx, d)
    if outcome is Outcome.EMPTY_INDEX:
        return []
    ids, lows, highs = idx._ids, idx._lows, idx._highs
    if outcome is Outcome.AMBIGUOUS_TIE:
        out = sorted(((ids[k], _gap(idx.bands[k], d)) for k in (i, j)), key=lambda t: t[0])
        left, right = i - 1, j + 1
    elif outcome is Outcome.IN_BAND:
        out = [(ids[i], 0.0)]
        left, right = i - 1, i + 1
    else:
        # the nearest band is one of the two neighbours of the gap; the merge
        # below emits it first
        out = []
        left, right = (i, i + 1) if d > highs[i] else (i - 1, i)
    n = len(ids)
    need = max_neighbors - len(out)
    while need > 0 and (left >= 0 or right < n):
        if right >= n or (left >= 0 and (d - highs[left], ids[left]) <= (lows[right] - d, ids[right])):
            out.append((ids[left], d - highs[left]))
            left -= 1
        else:
            out.append((ids[right], lows[right] - d))
            right += 1
        need -= 1
    return out[:max_neighbors]


def identify(idx: BandedIndex, probe, max_neighbors: int = 3) -> list[tuple[str, float]]:
    """Ranked ``(person, interval distance)`` candidates for a probe.

    The classified person comes first (gap 0 when inside its band); the rest
    follow by increasing gap, ties broken by person id.
    """
    return identify_distance(idx, idx.distance(probe), max_neighbors)


def authenticate_distance(idx: BandedIndex, claimed: str, d: float) -> bool:
    return idx.band_for(claimed).contains(d)


def authenticate(idx: BandedIndex, claimed: str, probe) -> bool:
    """Accept iff the probe's distance lies inside the claimed person's band."""
    band = idx.band_for(claimed)
    return band.contains(idx.distance(probe))


def enroll(idx: BandedIndex, gallery: Gallery, person: str, samples,
           policy: MeanPolicy = MeanPolicy.FROZEN) -> tuple[BandedIndex, Gallery]:
    """Add a person; returns a new index and gallery, leaving the inputs intact.

    FROZEN keeps the current mean and inserts one band. RECOMPUTE rebuilds
    the mean and every band from the extended gallery.
    """
    if person in gallery or person in idx:
        raise DuplicatePersonError(f"person {person!r} already enrolled")
    rows = _prepare(samples, idx.dimension)
    new_gallery = gallery.with_person(person, rows)
    if policy is MeanPolicy.RECOMPUTE:
        new_idx = build_index(new_gallery, idx.margin, epsilon=idx.epsilon,
                              tie_tolerance=idx.tie_tolerance, version=idx.version + 1)
    else:
        band = band_from_distances(person, l1_distances(rows, idx.mean.values),
                                   idx.margin, idx.epsilon)
        clashes = [(b.person, person) for b in idx.bands
                   if b.low <= band.high and band.low <= b.high]
        if clashes:
            raise BandCollisionError(clashes)
        new_idx = replace(idx, bands=idx.bands + (band,), version=idx.version + 1)
    log.info("enrolled person (%d samples) -> index v%d", rows.shape[0], new_idx.version)
    return new_idx, new_gallery
