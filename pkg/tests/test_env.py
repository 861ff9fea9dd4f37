import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rewardcert.core import Box, NoiseSpec, sample_noise
from rewardcert.env import (Continuous, Discrete, EnvModel, GridPolicy, NetworkPolicy, load_policy,
                            make_builtin_env, make_env, perturbed_step, perturbed_step_batch,
                            policy_from_json, save_policy)
from rewardcert.net import Layer, MlpNet

BUILTINS = ["cartpole", "mountaincar", "b1", "b2", "contract1d"]


@pytest.mark.parametrize("name,n,discrete", [("cartpole", 4, True), ("b1", 2, False),
                                             ("mountaincar", 2, True), ("b2", 2, False)])
def test_builtin_dimensions(name, n, discrete):
    env = make_builtin_env(name)
    assert env.n == n
    assert env.discrete == discrete


def test_unknown_builtin_and_parameter():
    with pytest.raises(ValueError):
        make_builtin_env("acrobot")
    with pytest.raises(ValueError):
        make_builtin_env("mountaincar", frce=0.1)


def test_initial_and_terminal_must_be_disjoint():
    env = make_builtin_env("contract1d")
    with pytest.raises(ValueError):
        EnvModel("bad", env.state_box, Box([-0.1], [0.1]), env.terminal_boxes, env.action_space,
                 env._dynamics, env._reward, 1.0, 1.0, env.params)


def _const_policy(env, action=0.0):
    if env.discrete:
        return GridPolicy([env.state_box.lo], [env.state_box.hi], [action], env.action_space)
    return GridPolicy([env.state_box.lo], [env.state_box.hi], [action], env.action_space)


def test_mountaincar_push_right_velocity():
    env = make_builtin_env("mountaincar")
    out = perturbed_step(env, _const_policy(env, 2.0), [-0.5, 0.0], [0.0, 0.0])
    assert out.next[1] == pytest.approx(0.001 - 0.0025 * np.cos(-1.5), rel=1e-15, abs=1e-18)
    assert out.next[0] == pytest.approx(-0.5 + out.next[1], abs=1e-15)


@pytest.mark.parametrize("name", BUILTINS)
def test_terminal_states_absorb(name):
    env = make_builtin_env(name)
    rng = np.random.default_rng(0)
    pol = _const_policy(env, 0.0)
    for box in env.terminal_boxes:
        inner = box.intersect(env.state_box)
        for s in inner.sample(rng, 20):
            out = perturbed_step(env, pol, s, sample_noise(NoiseSpec.uniform(0.1, env.n), rng))
            assert np.array_equal(out.next, s) and out.reward == 0.0


@pytest.mark.parametrize("name", BUILTINS)
def test_zero_noise_matches_plain_step(name):
    env = make_builtin_env(name)
    rng = np.random.default_rng(1)
    pol = NetworkPolicy(MlpNet.init([env.n, 8, env.action_space.n if env.discrete else 1], rng=rng),
                        env.action_space)
    s = env.state_box.sample(rng, 50)
    s = s[~env.is_terminal(s)]
    for i in range(s.shape[0]):
        nxt, r, _ = env.step(s[i:i + 1], pol.act(s[i:i + 1]))
        out = perturbed_step(env, pol, s[i], np.zeros(env.n))
        assert np.array_equal(out.next, nxt[0]) and out.reward == r[0]


@pytest.mark.parametrize("name", BUILTINS)
def test_perturbed_step_is_deterministic(name):
    env = make_builtin_env(name)
    rng = np.random.default_rng(2)
    pol = _const_policy(env, 1.0 if env.discrete and env.action_space.n > 1 else 0.0)
    s = env.state_box.sample(rng, 1)[0]
    d = sample_noise(NoiseSpec.uniform(0.1, env.n), rng)
    a, b = perturbed_step(env, pol, s, d), perturbed_step(env, pol, s, d)
    assert np.array_equal(a.next, b.next) and a.reward == b.reward and a.action == b.action


@pytest.mark.parametrize("name", BUILTINS)
def test_rewards_stay_in_declared_range(name):
    env = make_builtin_env(name)
    rng = np.random.default_rng(3)
    n = 100_000
    s = env.state_box.sample(rng, n)
    if env.discrete:
        a = rng.integers(0, env.action_space.n, n).astype(float)
    else:
        a = rng.uniform(env.action_space.lo, env.action_space.hi, n)
    _, r, _ = env.step(s, a)
    assert np.all((r >= env.r_min) & (r <= env.r_max) | (r == 0.0))


@pytest.mark.parametrize("name,overrides", [("cartpole", {}), ("mountaincar", {"left_wall": False}),
                                            ("b1", {}), ("b2", {}), ("contract1d", {})])
def test_empirical_lipschitz_of_dynamics(name, overrides):
    env = make_builtin_env(name, **overrides)
    L = env.lipschitz_f()
    rng = np.random.default_rng(4)
    s = env.state_box.sample(rng, 10_000)
    t = np.clip(s + rng.normal(0, 0.05, s.shape) * env.state_box.width, env.state_box.lo, env.state_box.hi)
    acts = env.actions() if env.discrete else rng.uniform(env.action_space.lo, env.action_space.hi, 3)
    for a in acts:
        fs, _ = env.successor(s, a)
        ft, _ = env.successor(t, a)
        lhs = np.abs(fs - ft).sum(axis=1)
        rhs = L * np.abs(s - t).sum(axis=1)
        assert np.all(lhs <= rhs * (1 + 1e-9) + 1e-15)


def test_mountaincar_wall_reset_is_a_jump():
    # the Gym-style inelastic wall breaks Lipschitz continuity: states on either
    # side of the wall-hit boundary keep or lose their whole velocity
    env = make_builtin_env("mountaincar")
    P = env.params
    u = -0.07
    edge = -1.13
    for _ in range(50):  # fixed point of edge + v(edge) = min_position
        v = u - P["force"] - P["gravity"] * np.cos(3 * edge)
        edge = P["min_position"] - v
    s = np.array([[edge - 1e-9, u], [edge + 1e-9, u]])
    nxt, _ = env.successor(s, np.zeros(2))
    assert nxt[0, 1] == 0.0
    assert abs(nxt[1, 1] - v) < 1e-6


def test_successor_interval_encloses_samples():
    env = make_builtin_env("cartpole")
    rng = np.random.default_rng(5)
    lo = env.state_box.sample(rng, 30)
    hi = np.minimum(lo + 0.05, env.state_box.hi)
    for a in env.actions():
        nlo, nhi = env.successor_interval(lo, hi, a, a)
        for j in range(30):
            x = rng.uniform(lo[j], hi[j], (100, env.n))
            nx, _ = env.successor(x, a)
            assert np.all(nx >= nlo[j]) and np.all(nx <= nhi[j])


def test_displacement_bound_covers_samples():
    env = make_builtin_env("b2")
    D = env.displacement_bound()
    rng = np.random.default_rng(6)
    s = env.state_box.sample(rng, 10_000)
    a = rng.uniform(env.action_space.lo, env.action_space.hi, 10_000)
    nxt, _ = env.successor(s, a)
    assert np.abs(nxt - s).sum(axis=1).max() <= D


def test_zero_weight_network_policy_is_constant():
    env = make_builtin_env("mountaincar")
    pol = NetworkPolicy(MlpNet.zeros([2, 4, 3]), env.action_space)
    acts = pol.act(env.state_box.sample(np.random.default_rng(7), 100))
    assert np.all(acts == acts[0])
    assert pol.lipschitz == 0.0


def test_grid_policy_lookup_1d():
    space = Discrete(2)
    pol = GridPolicy([[-1.0], [0.0]], [[0.0], [1.0]], [0, 1], space)
    assert pol.act([[-0.5]])[0] == 0
    assert pol.act([[0.5]])[0] == 1
    # boundary belongs to the lower cell; observations past the domain use the edge cell
    assert pol.act([[0.0]])[0] == 0
    assert pol.act([[5.0]])[0] == 1 and pol.act([[-5.0]])[0] == 0


def test_grid_policy_tensor_and_box_scan_agree():
    env = make_builtin_env("mountaincar")
    t = GridPolicy.tensor(env.state_box, (5, 4), lambda c: (c[:, 0] > -0.4).astype(float) * 2, env.action_space)
    plain = GridPolicy(t.lo, t.hi, t.cell_actions, env.action_space)
    x = env.state_box.sample(np.random.default_rng(8), 2000)
    np.testing.assert_array_equal(t.act(x), plain.act(x))


@pytest.mark.parametrize("kind", ["mlp", "grid"])
def test_policy_round_trip(tmp_path, kind):
    env = make_builtin_env("mountaincar")
    if kind == "mlp":
        pol = NetworkPolicy(MlpNet.init([2, 6, 3], rng=9), env.action_space)
    else:
        pol = GridPolicy.tensor(env.state_box, (3, 2), lambda c: np.arange(c.shape[0]) % 3, env.action_space)
    path = tmp_path / "policy.json"
    save_policy(pol, path)
    back = load_policy(path, env)
    assert json.dumps(back.to_json()) == json.dumps(pol.to_json())


def test_policy_dimension_mismatch():
    env = make_builtin_env("cartpole")
    with pytest.raises(ValueError):
        policy_from_json(MlpNet.init([2, 4, 2], rng=0).to_json(), env)


def test_malformed_policy_file(tmp_path):
    env = make_builtin_env("mountaincar")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ValueError):
        load_policy(p, env)
    with pytest.raises(ValueError):
        policy_from_json({"kind": "grid", "cells": [{"lo": [0, 0]}]}, env)


@settings(max_examples=40, deadline=None)
@given(s=st.floats(-0.2, 0.2), r=st.floats(0.01, 0.3))
def test_grid_action_masses_sum_to_one(s, r):
    pol = GridPolicy([[-1.0], [0.0]], [[0.0], [1.0]], [0, 1], Discrete(2))
    m = pol.action_masses(NoiseSpec.uniform(r), [[s]])
    assert abs(m.sum() - 1.0) <= 1e-12


def test_grid_masses_two_cell_example():
    pol = GridPolicy([[-1.0], [0.0]], [[0.0], [1.0]], [0, 1], Discrete(2))
    m = pol.action_masses(NoiseSpec.uniform(0.1), [[0.05]])[0]
    np.testing.assert_allclose(m, [0.25, 0.75], rtol=1e-12)


def test_make_env_overrides_boxes():
    env = make_env({"builtin": "contract1d", "params": {"state_bound": 8.0},
                    "initial_box": {"lo": [4.0], "hi": [6.0]}})
    assert env.state_box == Box([-8.0], [8.0])
    assert env.initial_box == Box([4.0], [6.0])
    with pytest.raises(ValueError):
        make_env({"builtin": "contract1d", "colour": "red"})


def test_batch_step_matches_single_steps():
    env = make_builtin_env("b1")
    pol = NetworkPolicy(MlpNet.init([2, 8, 1], act="tanh", rng=10), env.action_space)
    rng = np.random.default_rng(11)
    s = env.state_box.sample(rng, 20)
    d = sample_noise(NoiseSpec.uniform(0.1, 2), rng, 20)
    nxt, r, a, _ = perturbed_step_batch(env, pol, s, d)
    for i in range(20):
        out = perturbed_step(env, pol, s[i], d[i])
        # batched matmuls may round differently in the last ulp
        np.testing.assert_allclose(out.next, nxt[i], rtol=1e-12, atol=1e-15)
        assert out.reward == r[i]


def test_continuous_space_rejects_action_list():
    env = make_builtin_env("b1")
    assert isinstance(env.action_space, Continuous)
    with pytest.raises(ValueError):
        env.actions()
