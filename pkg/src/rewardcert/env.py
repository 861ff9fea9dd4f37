"""Deterministic control loops under observation noise, plus policy representations.

A step from state ``s`` observes ``s + delta``, acts on the observation and
advances the *true* state: ``s' = f(s, pi(s + delta))``, reward
``R(s, pi(s + delta), s')``.  Terminal states are absorbing with zero reward.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import partial
from itertools import product
from pathlib import Path
from typing import Callable

import numpy as np

from . import _accel
from .core import Box, NoiseSpec, boxes_contain, noise_box_mass, sample_noise
from .interval import DUAL_OPS, FLOAT_OPS, INTERVAL_OPS, IDual, Interval
from .net import MlpNet

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- action spaces

@dataclass(frozen=True)
class Discrete:
    n: int

    discrete = True

    def to_json(self):
        return {"kind": "discrete", "n": self.n}


@dataclass(frozen=True)
class Continuous:
    lo: float
    hi: float

    discrete = False

    def to_json(self):
        return {"kind": "continuous", "lo": self.lo, "hi": self.hi}


# ---------------------------------------------------------------- environment

@dataclass
class StepOutcome:
    observed: np.ndarray
    action: float
    next: np.ndarray
    reward: float
    clamped: bool = False


class EnvModel:
    """Compact-state control system with box-union terminal and initial regions.

    ``dynamics(cols, a, params, ops)`` maps a list of state columns and an
    action column to the list of successor columns; it must only use
    arithmetic operators and ``ops`` so it can run on floats, intervals and
    interval duals alike.  ``reward(s, a, s_next, params)`` is vectorised.
    """

    def __init__(self, name, state_box: Box, initial_box: Box, terminal_boxes, action_space,
                 dynamics: Callable, reward: Callable, r_min: float, r_max: float,
                 params: dict | None = None, notes: str = "", continuous_dynamics: bool = True):
        self.name = name
        # False when f has jumps (e.g. an inelastic wall); disables Jacobian-based bounds that assume continuity
        self.continuous_dynamics = continuous_dynamics
        self.state_box = state_box
        self.initial_box = initial_box
        self.terminal_boxes = tuple(terminal_boxes)
        self.action_space = action_space
        self._dynamics = dynamics
        self._reward = reward
        self.r_min = float(r_min)
        self.r_max = float(r_max)
        self.params = dict(params or {})
        self.notes = notes
        self._lipschitz = None
        if self.r_min > self.r_max:
            raise ValueError("r_min must not exceed r_max")
        for b in (initial_box, *self.terminal_boxes):
            if b.dim != state_box.dim:
                raise ValueError(f"region dimension {b.dim} != state dimension {state_box.dim}")
        # S0 and S_g must be disjoint (a shared face still counts as overlap)
        for b in self.terminal_boxes:
            if initial_box.intersect(b) is not None:
                raise ValueError(f"initial box {initial_box} intersects terminal box {b}")

    @property
    def n(self) -> int:
        return self.state_box.dim

    @property
    def discrete(self) -> bool:
        return self.action_space.discrete

    def actions(self) -> np.ndarray:
        if not self.discrete:
            raise ValueError("continuous action space has no action list")
        return np.arange(self.action_space.n, dtype=np.float64)

    def is_terminal(self, states) -> np.ndarray:
        return boxes_contain(self.terminal_boxes, states)

    # -------------------------------------------------------- point dynamics

    def raw_dynamics(self, states, actions) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        a = np.broadcast_to(np.asarray(actions, dtype=np.float64), (s.shape[0],))
        cols = self._dynamics([s[:, j] for j in range(self.n)], a, self.params, FLOAT_OPS)
        return np.stack([np.broadcast_to(c, (s.shape[0],)) for c in cols], axis=1)

    def successor(self, states, actions):
        """``f`` followed by the state-box clamp, ignoring terminal absorption.

        Returns ``(next_states, clamped_mask)``.
        """
        raw = self.raw_dynamics(states, actions)
        nxt = self.state_box.clip(raw)
        return nxt, np.any(nxt != raw, axis=1)

    def reward(self, states, actions, next_states) -> np.ndarray:
        s = np.atleast_2d(states)
        a = np.broadcast_to(np.asarray(actions, dtype=np.float64), (s.shape[0],))
        r = self._reward(s, a, np.atleast_2d(next_states), self.params)
        return np.broadcast_to(np.asarray(r, dtype=np.float64), (s.shape[0],)).copy()

    def step(self, states, actions):
        """Absorbing step: returns ``(next, reward, clamped)`` for a batch."""
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        nxt, clamped = self.successor(s, actions)
        r = self.reward(s, actions, nxt)
        term = self.is_terminal(s)
        nxt[term] = s[term]
        r[term] = 0.0
        clamped &= ~term
        return nxt, r, clamped

    # -------------------------------------------------------- interval dynamics

    def _raw_interval(self, lo, hi, a_lo, a_hi):
        lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
        hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
        B = lo.shape[0]
        a = Interval(np.broadcast_to(np.asarray(a_lo, dtype=np.float64), (B,)),
                     np.broadcast_to(np.asarray(a_hi, dtype=np.float64), (B,)))
        cols = [Interval(lo[:, j], hi[:, j]) for j in range(self.n)]
        out = self._dynamics(cols, a, self.params, INTERVAL_OPS)
        olo = np.stack([np.broadcast_to(Interval.lift(c).lo, (B,)) for c in out], axis=1)
        ohi = np.stack([np.broadcast_to(Interval.lift(c).hi, (B,)) for c in out], axis=1)
        pad = 1e-12 * (1.0 + np.maximum(np.abs(olo), np.abs(ohi)))
        return olo - pad, ohi + pad

    def successor_interval(self, lo, hi, a_lo, a_hi):
        """Sound enclosure of ``clamp(f(s, a))`` over state boxes and action intervals."""
        olo, ohi = self._raw_interval(lo, hi, a_lo, a_hi)
        return self.state_box.clip(olo), self.state_box.clip(ohi)

    def _action_ranges(self):
        if self.discrete:
            return [(float(a), float(a)) for a in self.actions()]
        return [(self.action_space.lo, self.action_space.hi)]

    def _jacobian(self, lo, hi, a_lo, a_hi):
        """Interval Jacobian of the raw dynamics over boxes as ``(jlo, jhi)``, shape ``(B, n, n [+1])``.

        The extra column is the action derivative (continuous actions only).
        """
        B = lo.shape[0]
        lo_all = [lo[:, j] for j in range(self.n)]
        hi_all = [hi[:, j] for j in range(self.n)]
        if self.discrete:
            vars_ = IDual.variables(lo_all, hi_all)
            a = np.full(B, a_lo)
            n_cols = self.n
        else:
            vars_ = IDual.variables(lo_all + [np.full(B, a_lo)], hi_all + [np.full(B, a_hi)])
            a = vars_.pop()
            n_cols = self.n + 1
        out = self._dynamics(vars_, a, self.params, DUAL_OPS)
        jlo = np.zeros((B, self.n, n_cols))
        jhi = np.zeros_like(jlo)
        for i, c in enumerate(out):
            if not isinstance(c, IDual):
                continue
            for k, g in enumerate(c.grad):
                jlo[:, i, k] = np.broadcast_to(g.lo, (B,))
                jhi[:, i, k] = np.broadcast_to(g.hi, (B,))
        return jlo, jhi

    def lipschitz_f(self, splits: int | None = None) -> float:
        """L1 Lipschitz bound of the clamped dynamics from an interval Jacobian.

        Columns cover the state and, for continuous actions, the action
        variable (the lift of grid checks to off-grid states needs the joint
        constant).  The state box is split into ``splits**n`` sub-boxes.
        """
        default = splits is None
        if default and self._lipschitz is not None:
            return self._lipschitz
        if default:
            splits = {1: 64, 2: 16, 3: 6}.get(self.n, 3)
        subs_lo, subs_hi = _subdivide(self.state_box, splits)
        best = 0.0
        for a_lo, a_hi in self._action_ranges():
            jlo, jhi = self._jacobian(subs_lo, subs_hi, a_lo, a_hi)
            mag = np.maximum(np.abs(jlo), np.abs(jhi))
            best = max(best, float(mag.sum(axis=1).max()))
        if default:
            self._lipschitz = best
        return best

    def displacement_bound(self, splits: int | None = None) -> float:
        """Upper bound on ``||clamp(f(s, a)) - s||_1`` over the state box and all actions.

        Per sub-box this takes the smaller of the plain interval bound and a
        centred form ``|f(c) - c| + |J - I| r``; the latter is exact for
        identity-like dynamics but needs continuous dynamics.
        """
        if splits is None:
            splits = {1: 256, 2: 32, 3: 8}.get(self.n, 4)
        lo, hi = _subdivide(self.state_box, splits)
        c, r = 0.5 * (lo + hi), 0.5 * (hi - lo)
        eye = np.eye(self.n)
        best = 0.0
        for a_lo, a_hi in self._action_ranges():
            nlo, nhi = self.successor_interval(lo, hi, a_lo, a_hi)
            d = np.maximum(np.abs(nhi - lo), np.abs(nlo - hi)).sum(axis=1)
            if self.continuous_dynamics:
                # clamping onto S never moves a coordinate further from s, so raw f suffices
                ac, ar = 0.5 * (a_lo + a_hi), 0.5 * (a_hi - a_lo)
                flo, fhi = self._raw_interval(c, c, ac, ac)
                g = np.maximum(np.abs(flo - c), np.abs(fhi - c))
                jlo, jhi = self._jacobian(lo, hi, a_lo, a_hi)
                dev = np.maximum(np.abs(jlo), np.abs(jhi))
                dev[:, :, :self.n] = np.maximum(np.abs(jlo[:, :, :self.n] - eye), np.abs(jhi[:, :, :self.n] - eye))
                spread = (dev[:, :, :self.n] * r[:, None, :]).sum(axis=2)
                if dev.shape[2] > self.n:
                    spread = spread + dev[:, :, self.n] * ar
                centred = (g + spread).sum(axis=1) * (1 + 1e-12)
                d = np.minimum(d, centred)
            best = max(best, float(d.max()))
        return best

    def describe(self) -> dict:
        return {"name": self.name, "n": self.n, "state_box": self.state_box.to_json(),
                "initial_box": self.initial_box.to_json(),
                "terminal_boxes": [b.to_json() for b in self.terminal_boxes],
                "action_space": self.action_space.to_json(), "r_min": self.r_min,
                "r_max": self.r_max, "params": self.params}


def _subdivide(box: Box, splits: int):
    edges = [np.linspace(box.lo[j], box.hi[j], splits + 1) for j in range(box.dim)]
    idx = np.array(list(product(range(splits), repeat=box.dim)))
    lo = np.stack([edges[j][idx[:, j]] for j in range(box.dim)], axis=1)
    hi = np.stack([edges[j][idx[:, j] + 1] for j in range(box.dim)], axis=1)
    return lo, hi


# ---------------------------------------------------------------- builtin systems

def _mc_min_speed(P):
    return -P["max_speed"] if P.get("min_speed") is None else P["min_speed"]


def _mc_dynamics(s, a, P, ops):
    p, u = s
    vs = P["vel_scale"]
    v = u * vs + (a - 1.0) * P["force"] - ops.cos(3.0 * p) * P["gravity"]
    v = ops.clip(v, _mc_min_speed(P), P["max_speed"])
    p2 = ops.clip(p + v, P["min_position"], P["max_position"])
    if P["left_wall"]:
        if ops is FLOAT_OPS:
            v = np.where((p2 <= P["min_position"]) & (v < 0), 0.0, v)
        elif ops is INTERVAL_OPS:
            hits = p2.lo <= P["min_position"]
            v = Interval(v.lo, np.where(hits, np.maximum(v.hi, 0.0), v.hi))
        # the wall reset is a jump; the Jacobian bound covers the smooth part only
    return [p2, v / vs]


def _param_reward(s, a, s2, P, key):
    return np.full(s.shape[0], P[key])


def _const_reward(key):
    # a partial (not a closure) so environments pickle for worker processes
    return partial(_param_reward, key=key)


def _cp_dynamics(s, a, P, ops):
    x, xd, th, thd = s
    total = P["masscart"] + P["masspole"]
    pml = P["masspole"] * P["length"]
    force = (2.0 * a - 1.0) * P["force_mag"]
    c, sn = ops.cos(th), ops.sin(th)
    temp = (force + pml * ops.sqr(thd) * sn) / total
    thacc = (P["gravity"] * sn - c * temp) / (P["length"] * (4.0 / 3.0 - P["masspole"] * ops.sqr(c) / total))
    xacc = temp - pml * thacc * c / total
    t = P["tau"]
    return [x + t * xd, xd + t * xacc, th + t * thd, thd + t * thacc]


def _b1_dynamics(s, a, P, ops):
    x1, x2 = s
    dt = P["dt"]
    return [x1 + dt * x2, x2 + dt * (a * ops.sqr(x2) - x1)]


def _b2_dynamics(s, a, P, ops):
    x1, x2 = s
    dt = P["dt"]
    return [x1 + dt * (x2 - ops.cube(x1)), x2 + dt * a]


def _contract_dynamics(s, a, P, ops):
    (x,) = s
    return [P["factor"] * x + 0.0 * a]


def _build_mountaincar(P):
    vs = P["vel_scale"]
    umax = P["max_speed"] / vs
    umin = _mc_min_speed(P) / vs
    S = Box([P["min_position"], umin], [P["max_position"], umax])
    S0 = Box([P["init_low"], max(-P["init_speed"] / vs, umin)], [P["init_high"], P["init_speed"] / vs])
    G = [Box([P["goal_position"], umin], [P["max_position"], umax])]
    return EnvModel("mountaincar", S, S0, G, Discrete(3), _mc_dynamics, _const_reward("step_reward"),
                    P["step_reward"], P["step_reward"], P,
                    notes="velocity coordinate is velocity / vel_scale", continuous_dynamics=not P["left_wall"])


def _build_cartpole(P):
    th = P["theta_threshold"]
    xt = P["x_threshold"]
    m = P["margin"]
    S = Box([-xt - m, -P["xdot_bound"], -th - m, -P["thetadot_bound"]],
            [xt + m, P["xdot_bound"], th + m, P["thetadot_bound"]])
    S0 = Box([-0.05] * 4, [0.05] * 4)
    G = [Box([xt, S.lo[1], S.lo[2], S.lo[3]], S.hi),
         Box(S.lo, [-xt, S.hi[1], S.hi[2], S.hi[3]]),
         Box([S.lo[0], S.lo[1], th, S.lo[3]], S.hi),
         Box(S.lo, [S.hi[0], S.hi[1], -th, S.hi[3]])]
    return EnvModel("cartpole", S, S0, G, Discrete(2), _cp_dynamics, _const_reward("step_reward"),
                    P["step_reward"], P["step_reward"], P,
                    notes="terminal region is the failure set; reward counts steps before failure")


def _build_b1(P):
    S = Box([-1.5, -1.5], [1.5, 1.5])
    return EnvModel("b1", S, Box([0.8, 0.5], [0.9, 0.6]), [Box([0.0, 0.05], [0.2, 0.3])],
                    Continuous(-P["u_max"], P["u_max"]), _b1_dynamics, _const_reward("step_reward"),
                    P["step_reward"], P["step_reward"], P)


def _build_b2(P):
    S = Box([-1.5, -1.5], [1.5, 1.5])
    return EnvModel("b2", S, Box([0.7, 0.7], [0.9, 0.9]), [Box([-0.3, -0.35], [0.1, 0.5])],
                    Continuous(-P["u_max"], P["u_max"]), _b2_dynamics, _const_reward("step_reward"),
                    P["step_reward"], P["step_reward"], P)


def _build_contract1d(P):
    g = P["goal_radius"]
    w = P["state_bound"]
    return EnvModel("contract1d", Box([-w], [w]), Box([P["init_low"]], [P["init_high"]]),
                    [Box([-g], [g])], Discrete(1), _contract_dynamics, _const_reward("step_reward"),
                    P["step_reward"], P["step_reward"], P)


BUILTIN_PARAMS = {
    "mountaincar": dict(force=0.001, gravity=0.0025, max_speed=0.07, min_position=-1.2,
                        max_position=0.6, goal_position=0.5, init_low=-0.6, init_high=-0.4,
                        init_speed=0.0, vel_scale=1.0, left_wall=True, step_reward=-1.0,
                        min_speed=None),
    "cartpole": dict(gravity=9.8, masscart=1.0, masspole=0.1, length=0.5, force_mag=10.0,
                     tau=0.02, theta_threshold=12 * 2 * np.pi / 360, x_threshold=2.4, margin=0.1,
                     xdot_bound=3.0, thetadot_bound=3.5, step_reward=1.0),
    "b1": dict(dt=0.1, u_max=2.0, step_reward=-1.0),
    "b2": dict(dt=0.1, u_max=2.0, step_reward=-1.0),
    "contract1d": dict(factor=0.5, goal_radius=0.05, state_bound=1.0, init_low=0.5, init_high=0.75, step_reward=1.0),
}

_BUILDERS = {"mountaincar": _build_mountaincar, "cartpole": _build_cartpole, "b1": _build_b1,
             "b2": _build_b2, "contract1d": _build_contract1d}


def make_builtin_env(name: str, **overrides) -> EnvModel:
    """Build one of the benchmark systems, optionally overriding its constants."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(_BUILDERS)}")
    P = dict(BUILTIN_PARAMS[name])
    unknown = set(overrides) - set(P)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    P.update(overrides)
    return _BUILDERS[name](P)


_ENV_KEYS = {"builtin", "params", "state_box", "initial_box", "terminal_boxes"}


def make_env(config) -> EnvModel:
    """Environment from a config dict: a builtin name plus overrides."""
    if isinstance(config, str):
        return make_builtin_env(config)
    unknown = set(config) - _ENV_KEYS
    if unknown:
        raise ValueError(f"unknown env config keys: {sorted(unknown)}")
    env = make_builtin_env(config["builtin"], **config.get("params", {}))
    if any(k in config for k in ("state_box", "initial_box", "terminal_boxes")):
        env = EnvModel(env.name,
                       Box.from_json(config["state_box"]) if "state_box" in config else env.state_box,
                       Box.from_json(config["initial_box"]) if "initial_box" in config else env.initial_box,
                       [Box.from_json(b) for b in config["terminal_boxes"]] if "terminal_boxes" in config
                       else env.terminal_boxes,
                       env.action_space, env._dynamics, env._reward, env.r_min, env.r_max,
                       env.params, env.notes, env.continuous_dynamics)
    return env


# ---------------------------------------------------------------- policies

class NetworkPolicy:
    """Network policy: argmax over outputs (discrete) or clipped scalar output."""

    kind = "mlp"

    def __init__(self, net: MlpNet, action_space):
        self.net = net
        self.action_space = action_space
        if action_space.discrete and net.out_dim != action_space.n:
            raise ValueError(f"policy has {net.out_dim} outputs for {action_space.n} actions")
        if not action_space.discrete and net.out_dim != 1:
            raise ValueError("continuous policies need a scalar output")

    @property
    def in_dim(self):
        return self.net.in_dim

    def act(self, obs) -> np.ndarray:
        out = self.net.forward(np.atleast_2d(obs))
        if self.action_space.discrete:
            return out.argmax(axis=1).astype(np.float64)
        return np.clip(out[:, 0], self.action_space.lo, self.action_space.hi)

    @property
    def lipschitz(self) -> float:
        return self.net.lipschitz_l1()

    @property
    def lipschitz_sound(self) -> bool:
        # argmax over outputs is discontinuous
        return not self.action_space.discrete

    def possible_actions(self, lo, hi) -> np.ndarray:
        olo, ohi = self.net.propagate_interval(lo, hi)
        return ohi >= olo.max(axis=1, keepdims=True)

    def action_bounds(self, lo, hi):
        olo, ohi = self.net.propagate_interval(lo, hi)
        a, b = self.action_space.lo, self.action_space.hi
        return np.clip(olo[:, 0], a, b), np.clip(ohi[:, 0], a, b)

    def to_json(self) -> dict:
        return self.net.to_json()


class GridPolicy:
    """Piecewise-constant policy over a box decomposition of the state space.

    Observations outside the covered domain are projected onto it first, so
    the outermost cells own all probability mass beyond the domain.
    """

    kind = "grid"

    def __init__(self, lo, hi, actions, action_space, dims=None):
        self.lo = np.atleast_2d(np.asarray(lo, dtype=np.float64))
        self.hi = np.atleast_2d(np.asarray(hi, dtype=np.float64))
        self.cell_actions = np.asarray(actions, dtype=np.float64).reshape(-1)
        self.action_space = action_space
        if not (self.lo.shape == self.hi.shape and self.lo.shape[0] == self.cell_actions.shape[0]):
            raise ValueError("grid cells and actions disagree in count")
        if np.any(self.lo > self.hi):
            raise ValueError("grid cell has lo > hi")
        self.domain = Box(self.lo.min(axis=0), self.hi.max(axis=0))
        self.dims = None
        self.edges = None
        if dims is not None:
            self._set_tensor(tuple(int(d) for d in dims))
        if action_space.discrete and np.any((self.cell_actions < 0) | (self.cell_actions >= action_space.n)
                                            | (self.cell_actions != np.round(self.cell_actions))):
            raise ValueError("grid actions must be valid discrete action indices")

    def _set_tensor(self, dims):
        if int(np.prod(dims)) != self.lo.shape[0] or len(dims) != self.lo.shape[1]:
            raise ValueError(f"dims {dims} do not match {self.lo.shape[0]} cells")
        edges = []
        for j, d in enumerate(dims):
            stride = int(np.prod(dims[j + 1:]))
            idx = np.arange(d) * stride
            e = np.concatenate([self.lo[idx, j], self.hi[idx[-1:], j]])
            if np.any(np.diff(e) <= 0):
                raise ValueError("tensor grid edges must be strictly increasing")
            edges.append(e)
        # verify the cells really form the tensor product in C order
        ids = np.array(list(product(*[range(d) for d in dims])))
        for j, e in enumerate(edges):
            if not (np.array_equal(self.lo[:, j], e[ids[:, j]]) and np.array_equal(self.hi[:, j], e[ids[:, j] + 1])):
                raise ValueError("cells are not laid out as a C-ordered tensor grid")
        self.dims = dims
        self.edges = edges

    @classmethod
    def tensor(cls, domain: Box, dims, action_fn, action_space):
        """Regular grid with ``dims[j]`` cells along axis ``j``; ``action_fn(centres)``."""
        edges = [np.linspace(domain.lo[j], domain.hi[j], d + 1) for j, d in enumerate(dims)]
        ids = np.array(list(product(*[range(d) for d in dims])))
        lo = np.stack([edges[j][ids[:, j]] for j in range(len(dims))], axis=1)
        hi = np.stack([edges[j][ids[:, j] + 1] for j in range(len(dims))], axis=1)
        acts = np.asarray(action_fn(0.5 * (lo + hi)), dtype=np.float64)
        return cls(lo, hi, acts, action_space, dims)

    @property
    def in_dim(self):
        return self.lo.shape[1]

    @property
    def lipschitz(self) -> float:
        return 0.0

    @property
    def lipschitz_sound(self) -> bool:
        return False

    def cell_index(self, obs) -> np.ndarray:
        x = self.domain.clip(np.atleast_2d(obs))
        if self.edges is not None:
            flat = np.zeros(x.shape[0], dtype=np.int64)
            for j, e in enumerate(self.edges):
                i = np.clip(np.searchsorted(e, x[:, j], side="left") - 1, 0, len(e) - 2)
                flat = flat * (len(e) - 1) + i
            return flat
        idx = _accel.first_containing_box(x, self.lo, self.hi)
        if np.any(idx < 0):
            raise ValueError("observation falls in a gap between grid cells")
        return idx

    def act(self, obs) -> np.ndarray:
        return self.cell_actions[self.cell_index(obs)]

    def _touching(self, lo, hi):
        lo = self.domain.clip(np.atleast_2d(lo))
        hi = self.domain.clip(np.atleast_2d(hi))
        return np.all((lo[:, None, :] <= self.hi[None]) & (hi[:, None, :] >= self.lo[None]), axis=2)

    def possible_actions(self, lo, hi) -> np.ndarray:
        touch = self._touching(lo, hi)
        onehot = np.zeros((self.cell_actions.shape[0], self.action_space.n), dtype=bool)
        onehot[np.arange(self.cell_actions.shape[0]), self.cell_actions.astype(int)] = True
        return (touch.astype(np.int64) @ onehot.astype(np.int64)) > 0

    def action_bounds(self, lo, hi):
        touch = self._touching(lo, hi)
        a = np.where(touch, self.cell_actions[None], np.inf).min(axis=1)
        b = np.where(touch, self.cell_actions[None], -np.inf).max(axis=1)
        return a, b

    def extended_cells(self):
        """Cells with faces on the domain boundary pushed out to infinity."""
        lo = np.where(self.lo <= self.domain.lo, -np.inf, self.lo)
        hi = np.where(self.hi >= self.domain.hi, np.inf, self.hi)
        return lo, hi

    def cell_masses(self, noise: NoiseSpec, states) -> np.ndarray:
        """``P(s + delta in cell_i)`` for each state (rows) and cell (columns)."""
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.edges is not None:
            out = np.ones((s.shape[0], 1))
            for j, e in enumerate(self.edges):
                ee = e.copy()
                ee[0], ee[-1] = -np.inf, np.inf
                cdf = noise.cdf_axis(ee[None, :] - s[:, j:j + 1], j)
                m = np.clip(np.diff(cdf, axis=1), 0.0, 1.0)
                out = (out[:, :, None] * m[:, None, :]).reshape(s.shape[0], -1)
            return out
        lo, hi = self.extended_cells()
        return noise_box_mass(noise, lo[None] - s[:, None], hi[None] - s[:, None])

    def action_masses(self, noise: NoiseSpec, states) -> np.ndarray:
        """Probability of each distinct action value at every state, ``(B, n_values)``."""
        m = self.cell_masses(noise, states)
        values = self.action_values
        onehot = (self.cell_actions[:, None] == values[None, :]).astype(np.float64)
        return m @ onehot

    @property
    def action_values(self) -> np.ndarray:
        return np.unique(self.cell_actions)

    def to_json(self) -> dict:
        cells = [{"lo": a.tolist(), "hi": b.tolist(),
                  "action": int(c) if self.action_space.discrete else float(c)}
                 for a, b, c in zip(self.lo, self.hi, self.cell_actions)]
        out = {"kind": "grid", "cells": cells}
        if self.dims is not None:
            out["dims"] = list(self.dims)
        return out


def policy_from_json(obj, env: EnvModel):
    kind = obj.get("kind")
    if kind == "mlp":
        net = MlpNet.from_json(obj)
        if net.in_dim != env.n:
            raise ValueError(f"policy input dim {net.in_dim} != env dimension {env.n}")
        return NetworkPolicy(net, env.action_space)
    if kind == "grid":
        try:
            lo = [c["lo"] for c in obj["cells"]]
            hi = [c["hi"] for c in obj["cells"]]
            acts = [c["action"] for c in obj["cells"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed grid policy: {exc}") from exc
        pol = GridPolicy(lo, hi, acts, env.action_space, obj.get("dims"))
        if pol.in_dim != env.n:
            raise ValueError(f"policy input dim {pol.in_dim} != env dimension {env.n}")
        return pol
    raise ValueError(f"unknown policy kind {kind!r}")


def load_policy(path, env: EnvModel):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed policy file {path}: {exc}") from exc
    return policy_from_json(obj, env)


def save_policy(policy, path):
    Path(path).write_text(json.dumps(policy.to_json()), encoding="utf-8")


# ---------------------------------------------------------------- stepping

def perturbed_step(env: EnvModel, policy, s, delta) -> StepOutcome:
    """One step of the perturbed loop from a single state."""
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    obs = s + np.asarray(delta, dtype=np.float64).reshape(1, -1)
    if env.is_terminal(s)[0]:
        return StepOutcome(obs[0], float("nan"), s[0].copy(), 0.0, False)
    a = policy.act(obs)
    nxt, r, clamped = env.step(s, a)
    if clamped[0]:
        log.debug("state left the state box and was clamped: %s", s[0])
    return StepOutcome(obs[0], float(a[0]), nxt[0], float(r[0]), bool(clamped[0]))


def perturbed_step_batch(env: EnvModel, policy, states, deltas):
    """Vectorised :func:`perturbed_step`: returns ``(next, reward, action, clamped)``."""
    s = np.atleast_2d(states)
    a = policy.act(s + deltas)
    nxt, r, clamped = env.step(s, a)
    return nxt, r, a, clamped


# ---------------------------------------------------------------- policy fitting

def fit_policy_cem(env: EnvModel, hidden=(16,), noise: NoiseSpec | None = None, rng=None,
                   iterations=30, population=40, elite_frac=0.2, episodes=8, max_steps=300,
                   act="tanh") -> NetworkPolicy:
    """Desk-scale cross-entropy search over policy weights maximising mean return."""
    rng = np.random.default_rng(rng)
    out = env.action_space.n if env.discrete else 1
    template = MlpNet.init([env.n, *hidden, out], act=act, rng=rng)
    dim = template.n_params
    mu, sd = np.zeros(dim), np.ones(dim)
    n_elite = max(1, int(population * elite_frac))
    starts = env.initial_box.sample(rng, episodes)

    def score(theta):
        net = template.copy()
        net.set_flat(theta)
        pol = NetworkPolicy(net, env.action_space)
        s = starts.copy()
        total = np.zeros(episodes)
        done = env.is_terminal(s)
        for _ in range(max_steps):
            if done.all():
                break
            d = 0.0 if noise is None else sample_noise(noise, rng, episodes)
            nxt, r, _, _ = perturbed_step_batch(env, pol, s, d)
            total += np.where(done, 0.0, r)
            s = nxt
            done |= env.is_terminal(s)
        return total.mean()

    for it in range(iterations):
        thetas = mu + sd * rng.standard_normal((population, dim))
        scores = np.array([score(t) for t in thetas])
        elite = thetas[np.argsort(scores)[-n_elite:]]
        mu, sd = elite.mean(axis=0), elite.std(axis=0) + 0.02
        log.info("cem iter %d: best %.3f mean %.3f", it, scores.max(), scores.mean())
    template.set_flat(mu)
    return NetworkPolicy(template, env.action_space)

