import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rewardcert._accel import min_l1_distance
from rewardcert.core import Box
from rewardcert.env import make_builtin_env, make_env
from rewardcert.grid import build_grid, classify_grid, covering_radius_estimate, refine_grid


def test_unit_interval_quarter():
    disc = build_grid(Box([0.0], [1.0]), 0.25)
    np.testing.assert_array_equal(disc.points[:, 0], [0.0, 0.5, 1.0])


def test_unit_square_point_count():
    disc = build_grid(Box([0.0, 0.0], [1.0, 1.0]), 0.02)
    assert len(disc) == 51 ** 2
    np.testing.assert_allclose(disc.spacing, 0.02, rtol=1e-12)


def test_budget_is_enforced():
    with pytest.raises(ValueError, match="budget"):
        build_grid(Box([0.0, 0.0], [1.0, 1.0]), 1e-4, budget=1000)


def test_nonpositive_tau():
    with pytest.raises(ValueError):
        build_grid(Box([0.0], [1.0]), 0.0)


def test_covering_radius_brute_force_1d():
    disc = build_grid(Box([-1.0], [2.0]), 0.013)
    s = np.random.default_rng(0).uniform(-1, 2, (10_000, 1))
    assert min_l1_distance(s, disc.points).max() <= disc.tau


@settings(max_examples=25, deadline=None)
@given(dim=st.integers(1, 3), tau=st.floats(0.05, 0.5), seed=st.integers(0, 1000))
def test_covering_radius_property(dim, tau, seed):
    rng = np.random.default_rng(seed)
    lo = rng.uniform(-1, 0, dim)
    space = Box(lo, lo + rng.uniform(0.2, 1.5, dim))
    disc = build_grid(space, tau)
    s = space.sample(rng, 2000)
    d = min_l1_distance(s, disc.points)
    assert d.max() <= tau * (1 + 1e-12)
    assert covering_radius_estimate(disc, s) == pytest.approx(d.max(), abs=1e-12)


def test_refine_steps_tau_and_keeps_counterexamples():
    disc = build_grid(Box([0.0, 0.0], [1.0, 1.0]), 0.02)
    cex = np.array([[0.0123, 0.4567], [0.02, 0.02]])
    ref = refine_grid(disc, 0.002, cex)
    assert ref.tau == pytest.approx(0.018, abs=1e-15)
    pts = ref.points
    assert np.any(np.all(pts == cex[0], axis=1))
    assert len(ref) >= len(disc)


def test_refine_without_counterexamples_is_a_rebuild():
    disc = build_grid(Box([0.0], [1.0]), 0.1)
    ref = refine_grid(disc, 0.02)
    np.testing.assert_array_equal(ref.points, build_grid(Box([0.0], [1.0]), 0.08).points)


def test_refine_deduplicates_grid_point_counterexample():
    disc = build_grid(Box([0.0], [1.0]), 0.25)
    ref = refine_grid(disc, 0.05, [[0.0]])
    assert len(ref) == len(build_grid(Box([0.0], [1.0]), 0.2))


def test_refine_exhaustion():
    disc = build_grid(Box([0.0], [1.0]), 0.002)
    with pytest.raises(ValueError, match="exhausted"):
        refine_grid(disc, 0.002)


@settings(max_examples=15, deadline=None)
@given(steps=st.integers(1, 5))
def test_refinement_monotone(steps):
    disc = build_grid(Box([0.0, 0.0], [1.0, 0.5]), 0.1)
    rng = np.random.default_rng(steps)
    for _ in range(steps):
        nxt = refine_grid(disc, 0.01, rng.uniform(0, 0.5, (3, 2)))
        assert nxt.tau < disc.tau
        assert len(nxt) >= len(disc)
        disc = nxt


def _toy(terminal, initial=((0.5,), (0.75,))):
    return make_env({"builtin": "contract1d", "terminal_boxes": [{"lo": list(terminal[0]), "hi": list(terminal[1])}],
                     "initial_box": {"lo": list(initial[0]), "hi": list(initial[1])}})


def test_whole_space_terminal():
    env = _toy(((-1.0,), (1.0,)), initial=((2.0,), (2.0,)))
    sets = classify_grid(build_grid(env.state_box, 0.1), env)
    assert sets.c2.shape[0] == 0
    assert sets.c1.shape[0] == sets.points.shape[0]


def test_single_initial_point():
    env = make_builtin_env("contract1d", init_low=0.5, init_high=0.55)
    sets = classify_grid(build_grid(env.state_box, 0.1), env)
    assert sets.c3.shape[0] == 1


def test_empty_terminal_grid_gets_anchor():
    env = _toy(((0.01,), (0.02,)))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        sets = classify_grid(build_grid(env.state_box, 0.25), env)
    assert any("anchor" in str(x.message) for x in w)
    assert sets.c1.shape[0] == 1 and sets.c1[0, 0] == pytest.approx(0.015)


@pytest.mark.filterwarnings("ignore:no grid point")
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_classification_partitions_points(seed):
    rng = np.random.default_rng(seed)
    env = make_builtin_env("mountaincar")
    lo = env.state_box.lo + rng.uniform(0, 0.5, 2) * env.state_box.width
    hi = lo + rng.uniform(0.05, 0.4, 2) * env.state_box.width
    env = make_env({"builtin": "mountaincar", "terminal_boxes": [{"lo": lo.tolist(), "hi": hi.tolist()}],
                    "initial_box": {"lo": [-1.2, 0.0], "hi": [-1.19, 0.0]}} if lo[0] > -1.1 else "mountaincar")
    sets = classify_grid(build_grid(env.state_box, 0.05), env)
    assert sets.c1.shape[0] + sets.c2.shape[0] == sets.points.shape[0]
    assert np.all(env.is_terminal(sets.c1)) and not np.any(env.is_terminal(sets.c2))
    assert np.all(env.initial_box.contains(sets.c3))


def test_shell_is_the_terminal_rim():
    env = make_builtin_env("contract1d")
    sets = classify_grid(build_grid(env.state_box, 0.01), env)
    # goal [-0.05, 0.05]; points within tau of its boundary form the shell
    assert np.all(np.abs(sets.shell[:, 0]) > 0.05 - 0.01 - 1e-12)
    assert sets.decrease.shape[0] == sets.c2.shape[0] + sets.shell.shape[0]
