import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rewardcert import _accel

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba path disabled")


@needs_numba
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.integers(1, 4))
def test_min_l1_distance_paths_agree(seed, dim):
    rng = np.random.default_rng(seed)
    q, p = rng.normal(size=(50, dim)), rng.normal(size=(80, dim))
    np.testing.assert_array_equal(_accel.min_l1_distance(q, p, True), _accel.min_l1_distance(q, p, False))


@needs_numba
@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_first_box_paths_agree(seed):
    rng = np.random.default_rng(seed)
    # a regular 4x4 tiling so shared faces occur
    edges = np.linspace(0, 1, 5)
    lo = np.array([[a, b] for a in edges[:-1] for b in edges[:-1]])
    hi = lo + 0.25
    pts = np.concatenate([rng.uniform(-0.1, 1.1, (200, 2)), rng.choice(edges, (50, 2))])
    nb, np_ = _accel.first_containing_box(pts, lo, hi, True), _accel.first_containing_box(pts, lo, hi, False)
    np.testing.assert_array_equal(nb, np_)
    inside = np.all((pts >= 0) & (pts <= 1), axis=1)
    assert np.all((np_ >= 0) == inside)


def test_tail_counts_match_direct_count():
    v = np.random.default_rng(1).integers(0, 10, 300).astype(float)
    t = np.concatenate([[-np.inf, np.inf], np.arange(10.0), [3.5]])
    np.testing.assert_array_equal(_accel.tail_counts(v, t), [(v >= x).sum() for x in t])


def test_numpy_fallback_brute_force():
    rng = np.random.default_rng(0)
    q, p = rng.normal(size=(30, 3)), rng.normal(size=(40, 3))
    brute = np.abs(q[:, None, :] - p[None, :, :]).sum(axis=2).min(axis=1)
    np.testing.assert_allclose(_accel.min_l1_distance(q, p, False), brute, rtol=0, atol=1e-15)
