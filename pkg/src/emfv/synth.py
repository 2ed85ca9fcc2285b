"""Synthetic fixtures: face-like images and galleries whose distances to
their own mean fall in prescribed ranges.
"""
from __future__ import annotations

import numpy as np

from .core import normalize_rows
from .index import Gallery

# person -> (low, high) distance-to-mean ranges of the three-person fixture
THREE_PERSON_BANDS = {"p3": (0.39, 0.68), "p1": (0.85, 1.12), "p2": (1.18, 1.32)}


def face_images(num_classes: int = 4, per_class: int = 50, side: int = 16,
                noise: float = 0.1, seed: int = 0):
    """Grey ``side`` x ``side`` images: an oval face with eyes and a mouth
    whose placement and size depend on the class, plus jitter and noise.

    Returns ``(images, labels)`` with images shaped ``(N, side, side)``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1)
    params = []
    for c in range(num_classes):
        crng = np.random.default_rng([seed, c])
        params.append(dict(
            eye_y=crng.uniform(0.3, 0.45), eye_dx=crng.uniform(0.12, 0.25),
            eye_r=crng.uniform(0.05, 0.09), mouth_y=crng.uniform(0.65, 0.8),
            mouth_w=crng.uniform(0.1, 0.3), face_w=crng.uniform(0.3, 0.45),
        ))
    images, labels = [], []
    for c in range(num_classes):
        p = params[c]
        for _ in range(per_class):
            cx, cy = 0.5 + rng.normal(0, 0.03), 0.5 + rng.normal(0, 0.03)
            face = (((xx - cx) / p["face_w"]) ** 2 + ((yy - cy) / 0.45) ** 2) <= 1.0
            img = 0.6 * face.astype(float)
            for sign in (-1, 1):
                ex = cx + sign * p["eye_dx"]
                eye = (xx - ex) ** 2 + (yy - (cy - 0.5 + p["eye_y"])) ** 2 <= p["eye_r"] ** 2
                img[eye] = 0.05
            mouth = (np.abs(xx - cx) <= p["mouth_w"]) & (np.abs(yy - (cy - 0.5 + p["mouth_y"])) <= 0.04)
            img[mouth] = 0.15
            img = img + rng.normal(0, noise, img.shape)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    return np.asarray(images), np.asarray(labels)


def _profile(rng, n, dim):
    z = rng.normal(size=(n, dim))
    return z / np.abs(z).max(axis=1, keepdims=True)


def vectors_at_distances(targets, dim: int, rng, center=None, rounds: int = 60,
                         tol: float = 1e-11):
    """Unit-L2 nonnegative vectors whose L1 distances to *their own mean*
    equal ``targets``.

    Each vector is ``normalize(center * (1 + s * z))`` with a fixed random
    profile ``z`` in [-1, 1]; consecutive pairs use mirrored profiles so the
    mean stays near the center. The scale ``s`` of every vector is found by
    bisection, then the mean is recomputed, until distances stop moving.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.size
    if center is None:
        center = normalize_rows((1.0 + rng.random(dim))[None])[0]
    z = _profile(rng, n, dim)
    z[1::2] = -z[0::2][: n // 2]
    pair_head = np.arange(n) - np.arange(n) % 2
    s_max = 0.97

    def build(s):
        return normalize_rows(center * (1.0 + s[:, None] * z))

    # distance moves by O(1) per unit of s, so this resolves well below tol
    steps = min(60, int(np.ceil(np.log2(s_max / (1e-3 * tol)))))
    s = np.full(n, 0.5 * s_max)
    mean = build(s).mean(axis=0)
    for _ in range(rounds):
        lo, hi = np.zeros(n), np.full(n, s_max)
        for _ in range(100):
            short = np.abs(build(hi) - mean).sum(axis=1) < targets
            if not short.any():
                break
            heads = np.unique(pair_head[short])
            z[heads] = _profile(rng, heads.size, dim)
            tails = heads[heads + 1 < n] + 1
            z[tails] = -z[tails - 1]
        else:
            raise ValueError(f"target distance {targets.max():.3f} unreachable in dimension {dim}")
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            below = np.abs(build(mid) - mean).sum(axis=1) < targets
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        s = 0.5 * (lo + hi)
        vecs = build(s)
        mean = vecs.mean(axis=0)
        err = np.abs(np.abs(vecs - mean).sum(axis=1) - targets).max()
        if err < tol:
            return vecs
    raise ValueError(f"distance fixture did not converge (residual {err:.2e})")


def max_reachable_distance(dim: int) -> float:
    """Conservative upper bound of targets :func:`vectors_at_distances` can hit."""
    # median reach is about 0.2 * sqrt(dim); unreachable rows get new profiles
    return 0.1 * np.sqrt(dim)


def banded_gallery(ranges: dict, samples_per_person: int, dim: int, seed: int = 0,
                   hit_endpoints: bool = True, tol: float = 1e-11) -> Gallery:
    """Gallery whose per-person distances to the gallery mean lie in ``ranges``.

    With ``hit_endpoints`` the first two samples of each person sit exactly
    on the range endpoints, so a zero-margin build reproduces the ranges.
    Small galleries can be infeasible (two vectors are always equidistant
    from their midpoint); those raise ValueError.
    """
    rng = np.random.default_rng(seed)
    paired, singles = [], []
    for person, (a, b) in ranges.items():
        fixed = [a, b] if hit_endpoints and samples_per_person >= 2 else []
        free = rng.uniform(a, b, samples_per_person - len(fixed))
        # mirrored pairs at one target keep the mean near the center
        for t in free[: free.size // 2 * 2: 2]:
            paired += [(t, person), (t, person)]
        singles += [(t, person) for t in fixed + list(free[free.size // 2 * 2:])]
    singles.sort()
    plan = paired + singles
    vecs = vectors_at_distances([t for t, _ in plan], dim, rng, tol=tol)
    owners = np.asarray([p for _, p in plan])
    return Gallery(dim, {p: vecs[owners == p] for p in ranges})


def probe_at_distance(mean, target: float, rng) -> np.ndarray:
    """A unit-L2 nonnegative vector at L1 distance ``target`` from ``mean``."""
    return probes_at_distances(mean, [target], rng)[0]


def probes_at_distances(mean, targets, rng) -> np.ndarray:
    mean = np.asarray(getattr(mean, "values", mean), dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n, dim = targets.size, mean.size
    base = normalize_rows(np.maximum(mean, 1e-12)[None])[0]
    z = _profile(rng, n, dim)

    def build(s):
        return normalize_rows(base * (1.0 + s[:, None] * z))

    lo, hi = np.zeros(n), np.full(n, 0.97)
    if np.any(np.abs(build(lo) - mean).sum(axis=1) > targets):
        raise ValueError("target distance below reach for this mean")
    for _ in range(100):
        short = np.abs(build(hi) - mean).sum(axis=1) < targets
        if not short.any():
            break
        z[short] = _profile(rng, int(short.sum()), dim)
    else:
        raise ValueError("target distance out of reach for this mean")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        below = np.abs(build(mid) - mean).sum(axis=1) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return build(0.5 * (lo + hi))


def random_probes(mean, n: int, rng, spread: float = 0.97) -> np.ndarray:
    """Unit-L2 probes scattered around ``mean`` at random scales."""
    mean = np.asarray(getattr(mean, "values", mean), dtype=np.float64)
    base = normalize_rows(np.maximum(mean, 1e-12)[None])[0]
    z = rng.uniform(-1.0, 1.0, (n, mean.size))
    s = rng.uniform(0.0, spread, n)
    return normalize_rows(base * (1.0 + s[:, None] * z))


def random_banded_gallery(seed: int, dims=(4, 16, 256), persons=(2, 50), samples=(1, 20),
                          attempts: int = 20):
    """A random gallery with disjoint bands, drawn deterministically from ``seed``.

    Persons get equal slots of the reachable distance range and a random
    sub-range inside their slot. Draws that turn out infeasible (for example
    two single-sample persons, which are always equidistant from their mean)
    are redrawn. Returns ``(gallery, epsilon, attempt)``.
    """
    from .index import build_index
    from .errors import BandCollisionError

    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        dim = int(rng.choice(dims))
        m = int(rng.integers(persons[0], persons[1] + 1))
        n = int(rng.integers(samples[0], samples[1] + 1))
        top = max_reachable_distance(dim)
        edges = np.linspace(0.15 * top, top, m + 1)
        slot = edges[1] - edges[0]
        ranges = {}
        for k in range(m):
            a = edges[k] + rng.uniform(0.05, 0.3) * slot
            ranges[f"id{k:02d}"] = (a, a + rng.uniform(0.0, 0.6) * slot)
        eps = 0.02 * slot
        try:
            g = banded_gallery(ranges, n, dim, seed=int(rng.integers(2**31)),
                               hit_endpoints=False, tol=1e-5)
            build_index(g, 0.0, epsilon=eps)
        except (ValueError, BandCollisionError):
            continue
        return g, eps, attempt
    raise ValueError(f"no feasible gallery for seed {seed}")
