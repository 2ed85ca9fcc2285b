"""Brute-force reference implementations.

Nothing here reuses the search or distance code in :mod:`emfv.index`:
distances go through a BLAS dot product instead of a reduction, and every
band is scanned. Agreement between the two is evidence, not a tautology.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .index import Band, BandedIndex, ClassificationResult, Outcome


@dataclass
class OracleReport:
    checked: int = 0
    mismatches: list = field(default_factory=list)

    @property
    def agreed(self) -> bool:
        return not self.mismatches


def scan_distances(mean, probes) -> np.ndarray:
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    diff = np.abs(probes - np.asarray(mean, dtype=np.float64))
    return diff @ np.ones(diff.shape[1])


def _scan(bands, d, tie_tolerance):
    if not bands:
        return ClassificationResult(Outcome.EMPTY_INDEX, (), d)
    gaps = []
    for b in bands:
        if b.low <= d <= b.high:
            return ClassificationResult(Outcome.IN_BAND, (b.person,), d)
        gaps.append((b.low - d) if d < b.low else (d - b.high))
    below = [(g, b) for g, b in zip(gaps, bands) if b.high < d]
    above = [(g, b) for g, b in zip(gaps, bands) if b.low > d]
    if below and above:
        gl, bl = min(below, key=lambda t: t[0])
        gr, br = min(above, key=lambda t: t[0])
        if abs(gl - gr) <= tie_tolerance:
            return ClassificationResult(Outcome.AMBIGUOUS_TIE,
                                        tuple(sorted((bl.person, br.person))), d, min(gl, gr))
    g, b = min(zip(gaps, bands), key=lambda t: t[0])
    return ClassificationResult(Outcome.NEAREST_BAND, (b.person,), d, g)


def linear_scan_classify(mean, bands: list[Band], probe,
                         tie_tolerance: float = 0.0) -> ClassificationResult:
    """Classify by computing the distance and scanning every band."""
    mean_values = getattr(mean, "values", mean)
    d = float(scan_distances(mean_values, probe)[0])
    return _scan(list(bands), d, tie_tolerance)


def linear_scan_classify_distance(bands, d, tie_tolerance: float = 0.0) -> ClassificationResult:
    return _scan(list(bands), float(d), tie_tolerance)


def linear_scan_identify_distance(bands, d, max_neighbors, tie_tolerance: float = 0.0):
    """Rank every band by (gap, person id); tied pair goes first."""
    bands = list(bands)
    ranked = sorted((((b.low - d) if d < b.low else (d - b.high) if d > b.high else 0.0),
                     b.person) for b in bands)
    first = _scan(bands, d, tie_tolerance)
    if first.outcome is Outcome.AMBIGUOUS_TIE:
        tied = [t for t in ranked if t[1] in first.persons]
        tied.sort(key=lambda t: t[1])
        ranked = tied + [t for t in ranked if t[1] not in first.persons]
    return [(p, g) for g, p in ranked[:max_neighbors]]


def verify_disjoint(bands) -> list[tuple[int, int]]:
    """All index pairs ``(i, j)``, i < j, of intersecting closed bands. O(m^2)."""
    bands = list(bands)
    out = []
    for i in range(len(bands)):
        for j in range(i + 1, len(bands)):
            if bands[i].low <= bands[j].high and bands[j].low <= bands[i].high:
                out.append((i, j))
    return out


def results_agree(fast: ClassificationResult, slow: ClassificationResult, tol=1e-12) -> bool:
    return (fast.outcome is slow.outcome and fast.persons == slow.persons
            and abs(fast.gap - slow.gap) <= tol)


def linear_scan_batch(mean, bands, probes, tie_tolerance: float = 0.0, max_neighbors: int = 3):
    """Vectorised exhaustive scan over every (probe, band) pair.

    Returns ``(results, rankings)``: one ClassificationResult and one
    identify-style ranking per probe row.
    """
    bands = sorted(bands, key=lambda b: b.person)
    d = scan_distances(getattr(mean, "values", mean), probes)
    if not bands:
        return [ClassificationResult(Outcome.EMPTY_INDEX, (), float(x)) for x in d], [[] for _ in d]
    ids = [b.person for b in bands]
    lo = np.array([b.low for b in bands])
    hi = np.array([b.high for b in bands])
    D = d[:, None]
    gaps = np.where(D < lo, lo - D, np.where(D > hi, D - hi, 0.0))
    inside = (D >= lo) & (D <= hi)
    g_below = np.where(hi < D, gaps, np.inf)
    g_above = np.where(lo > D, gaps, np.inf)
    nearest_below, nearest_above = g_below.argmin(axis=1), g_above.argmin(axis=1)
    rows = np.arange(d.size)
    gl, gr = g_below[rows, nearest_below], g_above[rows, nearest_above]
    tie = np.isfinite(gl) & np.isfinite(gr) & (np.abs(gl - gr) <= tie_tolerance)
    k = min(max_neighbors, len(bands))
    order = np.argsort(gaps, axis=1, kind="stable")[:, :k + 1]
    # bulk conversion to Python objects; the per-row loop only assembles them
    top_ids = np.asarray(ids, dtype=object)[order].tolist()
    top_gaps = np.take_along_axis(gaps, order, axis=1).tolist()
    in_any, in_idx = inside.any(axis=1).tolist(), inside.argmax(axis=1).tolist()
    near = np.where(gl < gr, nearest_below, nearest_above)
    near_gap = gaps[rows, near].tolist()
    near, tie = near.tolist(), tie.tolist()
    below, above = nearest_below.tolist(), nearest_above.tolist()
    tie_gap = np.minimum(gl, gr).tolist()
    results, rankings = [], []
    for r, dist in enumerate(d.tolist()):
        if in_any[r]:
            res = ClassificationResult(Outcome.IN_BAND, (ids[in_idx[r]],), dist)
        elif tie[r]:
            pair = tuple(sorted((ids[below[r]], ids[above[r]])))
            res = ClassificationResult(Outcome.AMBIGUOUS_TIE, pair, dist, tie_gap[r])
        else:
            res = ClassificationResult(Outcome.NEAREST_BAND, (ids[near[r]],), dist, near_gap[r])
        ranked = list(zip(top_ids[r], top_gaps[r]))
        if res.outcome is Outcome.AMBIGUOUS_TIE:
            head = sorted((t for t in ranked if t[0] in res.persons), key=lambda t: t[0])
            ranked = head + [t for t in ranked if t[0] not in res.persons]
        results.append(res)
        rankings.append(ranked[:k])
    return results, rankings


def check_index(idx: BandedIndex, probes, max_neighbors: int = 3,
                chunk: int = 512) -> OracleReport:
    """Compare classify/identify against the exhaustive scan on every probe.

    Probes are scanned in chunks so per-probe result objects die young
    instead of piling up for the garbage collector.
    """
    from .index import classify_distance, identify_distance

    report = OracleReport()
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    nonempty = len(idx) > 0
    for start in range(0, probes.shape[0], chunk):
        block = probes[start:start + chunk]
        slow, slow_rank = linear_scan_batch(idx.mean, idx.bands, block, idx.tie_tolerance,
                                            max_neighbors)
        for k, d in enumerate(idx.distances(block).tolist()):
            fast = classify_distance(idx, d)
            fast_rank = identify_distance(idx, d, max_neighbors) if nonempty else []
            # the two routes compute d independently, so gaps may differ in the last bits
            ranked = slow_rank[k]
            same_rank = len(fast_rank) == len(ranked) and all(
                a[0] == b[0] and abs(a[1] - b[1]) <= 1e-12 for a, b in zip(fast_rank, ranked))
            ref = slow[k]
            agree = (fast.outcome is ref.outcome and fast.persons == ref.persons
                     and abs(fast.gap - ref.gap) <= 1e-12)
            if not agree or not same_rank:
                report.mismatches.append((start + k, (fast, fast_rank), (slow[k], slow_rank[k])))
            report.checked += 1
    return report


def _extended_loss(net, images, labels) -> np.longdouble:
    """Mean cross-entropy evaluated in extended precision.

    An independent forward pass (shift-and-add convolution rather than
    window unfolding) in ``np.longdouble``, so the rounding noise of a
    central difference sits far below the gradients being checked.
    """
    ld = np.longdouble
    x = images.astype(ld)
    for layer in net.layers:
        if layer.kind == "conv":
            k, s, p = layer.kernel_size, layer.stride, layer.padding
            if p:
                x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            ho, wo = (x.shape[2] - k) // s + 1, (x.shape[3] - k) // s + 1
            W = layer.W.astype(ld)
            out = np.zeros((x.shape[0], W.shape[0], ho, wo), dtype=ld)
            for i in range(k):
                for j in range(k):
                    out += np.einsum("nchw,oc->nohw", x[:, :, i:i + s * ho:s, j:j + s * wo:s],
                                     W[:, :, i, j])
            x = out + layer.b.astype(ld)[None, :, None, None]
        elif layer.kind == "relu":
            x = np.where(x > 0, x, ld(0))
        elif layer.kind == "maxpool":
            n, c, h, w = x.shape
            k = layer.window
            x = x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))
        elif layer.kind == "dense":
            x = x.reshape(x.shape[0], -1) @ layer.W.astype(ld).T + layer.b.astype(ld)
    # x now holds the logits (the softmax layer itself is a no-op here)
    shift = x - x.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    return -logp[np.arange(labels.size), labels].mean()


def finite_difference_gradient(net, image, label, epsilon: float = 1e-5) -> list[dict]:
    """Central-difference gradient of the cross-entropy loss for every parameter.

    Losses are computed in extended precision by :func:`_extended_loss`;
    the weights themselves are perturbed in float64.
    Returns one ``{name: array}`` dict per layer, shaped like ``net.params()``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    images = net._batch(image)
    labels = np.atleast_1d(np.asarray(label))
    grads = []
    for layer_params in net.params():
        g = {}
        for name, w in layer_params.items():
            out = np.zeros_like(w)
            flat_w, flat_out = w.reshape(-1), out.reshape(-1)
            for i in range(flat_w.size):
                orig = flat_w[i]
                flat_w[i] = orig + epsilon
                up = _extended_loss(net, images, labels)
                flat_w[i] = orig - epsilon
                down = _extended_loss(net, images, labels)
                flat_w[i] = orig
                flat_out[i] = float((up - down) / (2 * epsilon))
            g[name] = out
        grads.append(g)
    return grads
