import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emfv import synth
from emfv.core import l1_distances


def _check_hits(targets, vecs):
    assert np.all(vecs >= 0)
    assert np.allclose(np.linalg.norm(vecs, axis=1), 1.0)
    assert np.abs(l1_distances(vecs, vecs.mean(axis=0)) - targets).max() < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 30), st.sampled_from([16, 64, 256]))
def test_vectors_hit_their_targets(seed, n, dim):
    rng = np.random.default_rng(seed)
    targets = rng.uniform(0.3, 0.9, n) * synth.max_reachable_distance(dim)
    _check_hits(targets, synth.vectors_at_distances(targets, dim, rng, tol=1e-9))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 7), st.sampled_from([16, 64]))
def test_small_galleries_hit_or_refuse(seed, n, dim):
    # few vectors pull the mean hard and some target sets are infeasible:
    # the generator may refuse, but never returns a miss
    rng = np.random.default_rng(seed)
    targets = rng.uniform(0.3, 0.9, n) * synth.max_reachable_distance(dim)
    try:
        vecs = synth.vectors_at_distances(targets, dim, rng, tol=1e-9)
    except ValueError:
        return
    _check_hits(targets, vecs)


def test_two_equidistant_vectors_are_infeasible():
    with pytest.raises(ValueError):
        synth.vectors_at_distances([0.2, 0.5], 16, np.random.default_rng(0))


def test_banded_gallery_endpoints():
    g = synth.banded_gallery({"a": (0.2, 0.3), "b": (0.5, 0.6)}, 4, 64, seed=2)
    d = l1_distances(g.all_vectors(), g.all_vectors().mean(axis=0))
    assert sorted(np.round(d, 9))[0] == pytest.approx(0.2)
    assert g.samples["b"].shape == (4, 64)


def test_random_banded_gallery_deterministic():
    a, eps_a, _ = synth.random_banded_gallery(17)
    b, eps_b, _ = synth.random_banded_gallery(17)
    assert a == b and eps_a == eps_b


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_probes_at_distances(seed):
    rng = np.random.default_rng(seed)
    mean = synth.random_probes(np.ones(64), 1, rng)[0]
    targets = rng.uniform(0.1, 0.7, 5)
    probes = synth.probes_at_distances(mean, targets, rng)
    assert np.allclose(l1_distances(probes, mean), targets, atol=1e-12)


def test_face_images_shape_and_range():
    images, labels = synth.face_images(3, 5, 12, seed=1)
    assert images.shape == (15, 12, 12) and images.min() >= 0 and images.max() <= 1
    assert np.bincount(labels).tolist() == [5, 5, 5]
