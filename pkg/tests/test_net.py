import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rewardcert.core import Box
from rewardcert.net import Layer, MlpNet, backprop_scalar, forward, lipschitz_l1, propagate_interval


def _scalar_forward(net, x):
    """Reference evaluation with plain Python loops."""
    acts = {"relu": lambda v: max(v, 0.0), "tanh": math.tanh,
            "sigmoid": lambda v: 1.0 / (1.0 + math.exp(-v)), "linear": lambda v: v}
    a = [float(v) for v in x]
    for layer in net.layers:
        out = []
        for row, b in zip(layer.w, layer.b):
            out.append(acts[layer.act](sum(float(wi) * ai for wi, ai in zip(row, a)) + float(b)))
        a = out
    return np.array(a)


def test_zero_net_outputs_zero():
    net = MlpNet.zeros([3, 5, 1])
    assert np.all(forward(net, np.ones((4, 3))) == 0.0)
    assert lipschitz_l1(net) == 0.0


def test_single_affine_layer():
    net = MlpNet([Layer([[2.0]], [1.0], "linear")])
    assert forward(net, np.array([3.0]))[0] == 7.0


def test_forward_matches_loop_reference():
    rng = np.random.default_rng(0)
    net = MlpNet.init([3, 200, 200, 200, 1], rng=rng)
    xs = rng.uniform(-1, 1, (100, 3))
    ref = np.array([_scalar_forward(net, x) for x in xs])
    np.testing.assert_allclose(forward(net, xs), ref, rtol=1e-12, atol=1e-12)


def test_linear_gradient():
    net = MlpNet([Layer([[0.7]], [0.2], "linear")])
    (dw, db), = backprop_scalar(net, np.array([[3.0]]), 1.0)
    assert dw[0, 0] == 3.0 and db[0] == 1.0


def test_zero_upstream_gives_zero_gradient():
    net = MlpNet.init([2, 6, 1], act="tanh", rng=1)
    g = backprop_scalar(net, np.ones((3, 2)), 0.0)
    assert all(np.all(dw == 0) and np.all(db == 0) for dw, db in g)


@pytest.mark.parametrize("act", ["tanh", "sigmoid", "relu"])
def test_backprop_matches_central_differences(act):
    rng = np.random.default_rng(2)
    net = MlpNet.init([2, 8, 8, 1], act=act, rng=rng)
    x = rng.uniform(-1, 1, (7, 2))
    theta = net.get_flat()
    grad = MlpNet.flatten_grads(backprop_scalar(net, x, 1.0))
    eps = 1e-5
    idx = rng.choice(theta.size, 60, replace=False)
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        net.set_flat(tp)
        fp = net.value(x).sum()
        net.set_flat(tm)
        fm = net.value(x).sum()
        net.set_flat(theta)
        fd = (fp - fm) / (2 * eps)
        # relu: skip parameters whose perturbation crosses a kink
        if act == "relu" and abs(fd - grad[i]) > 1e-4 * max(1.0, abs(fd)):
            continue
        assert abs(fd - grad[i]) <= 1e-4 * max(1e-8, abs(fd), abs(grad[i])) + 1e-9


def test_identity_interval():
    net = MlpNet([Layer([[1.0]], [0.0], "linear")])
    iv = propagate_interval(net, Box([0.0], [1.0]))
    # the rounding allowance widens the enclosure by a few ulps
    assert -1e-14 < iv.lo[0] <= 0.0 and 1.0 <= iv.hi[0] < 1.0 + 1e-14


def test_relu_shift_interval():
    net = MlpNet([Layer([[1.0]], [-0.5], "relu")])
    iv = propagate_interval(net, Box([0.0], [1.0]))
    assert iv.lo[0] == 0.0
    assert iv.hi[0] == pytest.approx(0.5, abs=1e-14) and iv.hi[0] >= 0.5


def test_ibp_contains_samples():
    rng = np.random.default_rng(3)
    for _ in range(10):
        net = MlpNet.init([2, 16, 16, 1], act=rng.choice(["relu", "tanh", "sigmoid"]), rng=rng)
        lo = rng.uniform(-2, 1, (20, 2))
        hi = lo + rng.uniform(0, 1, (20, 2))
        L, H = net.propagate_interval(lo, hi)
        for j in range(20):
            x = rng.uniform(lo[j], hi[j], (200, 2))
            v = net.value(x)
            assert np.all(v >= L[j, 0]) and np.all(v <= H[j, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shrink=st.floats(0.0, 0.49))
def test_ibp_monotone_under_box_inclusion(seed, shrink):
    rng = np.random.default_rng(seed)
    net = MlpNet.init([3, 10, 10, 1], rng=rng)
    lo = rng.uniform(-1, 0, 3)
    hi = lo + rng.uniform(0.1, 1, 3)
    w = hi - lo
    L1, H1 = net.propagate_interval(lo, hi)
    L2, H2 = net.propagate_interval(lo + shrink * w, hi - shrink * w)
    assert L1[0, 0] <= L2[0, 0] and H2[0, 0] <= H1[0, 0]


def test_lipschitz_single_layer_column_sum():
    net = MlpNet([Layer([[2.0, -3.0]], [0.0], "linear")])
    assert lipschitz_l1(net) == 3.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), act=st.sampled_from(["relu", "tanh", "sigmoid"]))
def test_lipschitz_bounds_empirical_slope(seed, act):
    rng = np.random.default_rng(seed)
    net = MlpNet.init([2, 12, 12, 1], act=act, rng=rng)
    x = rng.uniform(-2, 2, (2000, 2))
    y = x + rng.normal(0, 0.3, x.shape)
    slope = np.abs(net.value(x) - net.value(y)) / np.abs(x - y).sum(axis=1)
    assert slope.max() <= lipschitz_l1(net) * (1 + 1e-12)


def test_lipschitz_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = MlpNet.init([2, 5, 4, 1], act="tanh", rng=rng)
    L, grads = net.lipschitz_l1_grad()
    assert L == pytest.approx(net.lipschitz_l1(), rel=1e-14)
    g = MlpNet.flatten_grads(grads)
    theta = net.get_flat()
    eps = 1e-7
    for i in rng.choice(theta.size, 30, replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        net.set_flat(tp)
        fp = net.lipschitz_l1()
        net.set_flat(tm)
        fm = net.lipschitz_l1()
        net.set_flat(theta)
        assert (fp - fm) / (2 * eps) == pytest.approx(g[i], rel=1e-5, abs=1e-7)


def test_json_round_trip_is_bit_identical():
    net = MlpNet.init([3, 7, 1], act="sigmoid", rng=5)
    back = MlpNet.from_json(net.to_json())
    for a, b in zip(net.layers, back.layers):
        assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b) and a.act == b.act


def test_layer_dims_must_chain():
    with pytest.raises(ValueError):
        MlpNet([Layer(np.ones((3, 2)), np.zeros(3)), Layer(np.ones((1, 4)), np.zeros(1))])
