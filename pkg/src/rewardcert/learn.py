"""Training reward martingales and the counterexample-guided certification loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import NoiseSpec, sample_noise
from .env import EnvModel, GridPolicy
from .grid import DEFAULT_POINT_BUDGET, TrainingSets, build_grid, classify_grid, refine_grid
from .net import MlpNet
from .sim import simulate_returns
from .verify import (KINDS, LRS, RSM, URS, MarginReport, ValidationResult, difference_bound,
                     margin_zeta, pick_engine, validate)

log = logging.getLogger(__name__)

# loss weight on the expected-decrease term, per benchmark
K2_DEFAULTS = {"cartpole": 0.01, "b1": 0.005, "mountaincar": 0.007, "b2": 0.05}


@dataclass
class TrainConfig:
    K: float = -0.01
    K_prime: float = 0.01
    k1: float = 1.0
    k2: float = 0.01
    k3: float = 1.0
    u_bar: float | None = None
    l_bar: float | None = None
    N: int = 16
    lr: float = 1e-3
    weight_decay: float = 1.5e-3
    epochs: int = 2000
    timeout_min: float = 60.0
    tau: float = 0.02
    xi: float = 0.002
    epsilon: float = 0.1
    hidden: tuple = (200, 200, 200)
    activation: str = "relu"
    k_cells: int = 10
    engine: str = "auto"
    weighting: str = "volume"
    batch_size: int | None = None
    train_margin: float = 0.0
    init: str = "random"
    init_epochs: int = 500
    point_budget: int = DEFAULT_POINT_BUDGET
    max_rounds: int | None = None
    pre_run_episodes: int = 200
    horizon: int = 1000

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.check()

    def check(self):
        if self.K > self.K_prime:
            raise ValueError("K must not exceed K'")
        if min(self.k1, self.k2, self.k3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.tau > 0 or not self.xi > 0:
            raise ValueError("tau and xi must be positive")
        if self.init not in ("random", "rollout"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------- certificates

def system_hash(env: EnvModel, policy, noise: NoiseSpec) -> str:
    blob = json.dumps({"env": env.describe(), "policy": policy.to_json(), "noise": noise.to_json()},
                      sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Certificate:
    net: MlpNet
    kind: str
    status: str
    tau: float
    K: float | None = None
    K_prime: float | None = None
    epsilon: float | None = None
    a2: float | None = None
    b2: float | None = None
    zeta: float | None = None
    zeta_prime: float | None = None
    inflation: float | None = None
    L_f: float = 0.0
    L_pi: float = 0.0
    L_h: float = 0.0
    m: float = 0.0
    D: float = 0.0
    expectation_mode: str = "Analytic"
    lipschitz_regime: str = "sound"
    system_hash: str = ""
    r_min: float = 0.0
    r_max: float = 0.0
    rounds: list = field(default_factory=list)
    counterexamples: list = field(default_factory=list)
    train_s: float = 0.0
    validate_s: float = 0.0

    @property
    def validated(self) -> bool:
        return self.status == "Validated"

    def value(self, s) -> np.ndarray:
        return self.net.value(np.atleast_2d(s))

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "net"}
        d["net"] = self.net.to_json()
        return d

    @classmethod
    def from_json(cls, obj) -> "Certificate":
        obj = dict(obj)
        net = MlpNet.from_json(obj.pop("net"))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown certificate fields: {sorted(unknown)}")
        return cls(net=net, **obj)


# ---------------------------------------------------------------- losses

@dataclass
class LossBatch:
    """Frozen inputs of one loss evaluation (successor draws included)."""

    c1: np.ndarray
    dec: np.ndarray
    succ: np.ndarray      # (P, N, n)
    c3: np.ndarray
    margin: float          # decrease margin excluding the Lipschitz part
    margin_slope: float    # d(margin)/d(L_h); the loss re-derives L_h from the weights


def sample_successors(env: EnvModel, policy, noise: NoiseSpec, states, N: int, rng) -> np.ndarray:
    """``N`` perturbed-action successors per state, shape ``(B, N, n)``; no terminal absorption."""
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    B, n = s.shape
    rep = np.repeat(s, N, axis=0)
    d = sample_noise(noise, rng, B * N)
    nxt, _ = env.successor(rep, policy.act(rep + d))
    return nxt.reshape(B, N, n)


def loss_margin(kind, margins: MarginReport, cfg: TrainConfig):
    """``(constant, slope)`` with margin = constant + slope * L_h (sign folded into the violation)."""
    coef = margins.tau * (1.0 + margins.L_f * (1.0 + margins.L_pi))
    if kind == URS:
        return margins.r_max + cfg.train_margin, coef
    if kind == LRS:
        return margins.r_min - cfg.train_margin, -coef
    return cfg.epsilon + cfg.train_margin, coef


def loss_from_batch(net: MlpNet, kind: str, batch: LossBatch, cfg: TrainConfig, thresholds=(None, None)):
    """Loss value, flat gradient and the three term values for frozen inputs."""
    u_bar, l_bar = thresholds
    n = batch.dec.shape[1] if batch.dec.size else batch.c1.shape[1]
    P, N = batch.succ.shape[0], batch.succ.shape[1] if batch.succ.ndim == 3 else 0
    parts = [batch.c1, batch.dec, batch.succ.reshape(-1, n), batch.c3]
    sizes = [p.shape[0] for p in parts]
    X = np.concatenate(parts)
    off = np.cumsum([0] + sizes)
    terms = {}
    L_h, lip_grads = net.lipschitz_l1_grad()
    margin = batch.margin + batch.margin_slope * L_h
    lip_weight = 0.0

    def upstream(h):
        nonlocal lip_weight
        g = np.zeros_like(h)
        h1, hd, hs, h3 = (h[off[i]:off[i + 1]] for i in range(4))
        # C1: range condition on terminal points (nonnegativity everywhere for RSM)
        if sizes[0]:
            # the band is shrunk by train_margin so interval checks between points pass
            tm = cfg.train_margin
            if kind == RSM:
                over, under = np.zeros_like(h1), np.maximum(tm - h1, 0.0)
                g1 = -(h1 < tm).astype(float)
            else:
                lo_b, hi_b = cfg.K + tm, cfg.K_prime - tm
                if lo_b > hi_b:
                    lo_b = hi_b = 0.5 * (cfg.K + cfg.K_prime)
                over, under = np.maximum(h1 - hi_b, 0.0), np.maximum(lo_b - h1, 0.0)
                g1 = (h1 > hi_b).astype(float) - (h1 < lo_b).astype(float)
            terms["C1"] = float((over + under).mean())
            g[off[0]:off[1]] = cfg.k1 * g1 / sizes[0]
        else:
            terms["C1"] = 0.0
        # C2: expected change against the margin
        if P:
            mean_next = hs.reshape(P, N).mean(axis=1)
            if kind == LRS:
                viol = hd - mean_next - margin
                sign = -1.0
            else:
                viol = mean_next - hd + margin
                sign = 1.0
            act = viol > 0
            terms["C2"] = float(np.maximum(viol, 0.0).mean())
            w = cfg.k2 * act / P
            # every active hinge also moves with L_h through the margin
            lip_weight = cfg.k2 * act.mean() * sign * batch.margin_slope
            g[off[1]:off[2]] = -sign * w
            g[off[2]:off[3]] = sign * np.repeat(w / N, N)
        else:
            terms["C2"] = 0.0
        # C3: tightness at initial states
        if sizes[3] and kind != RSM:
            if kind == URS and u_bar is not None:
                viol = h3 - u_bar
                g[off[3]:off[4]] = cfg.k3 * (viol > 0) / sizes[3]
            elif kind == LRS and l_bar is not None:
                viol = l_bar - h3
                g[off[3]:off[4]] = -cfg.k3 * (viol > 0) / sizes[3]
            else:
                viol = np.zeros(0)
            terms["C3"] = float(np.maximum(viol, 0.0).mean()) if viol.size else 0.0
        else:
            terms["C3"] = 0.0
        return g

    _, grads = net.value_and_backprop(X, upstream)
    grad = MlpNet.flatten_grads(grads)
    if lip_weight:
        grad = grad + lip_weight * MlpNet.flatten_grads(lip_grads)
    loss = cfg.k1 * terms["C1"] + cfg.k2 * terms["C2"] + cfg.k3 * terms["C3"]
    return loss, grad, terms


def _subsample(x, size, rng):
    if size is None or x.shape[0] <= size:
        return x
    return x[rng.choice(x.shape[0], size, replace=False)]


def make_batch(net, kind, sets: TrainingSets, cfg, env, policy, noise, rng, margins=None):
    """Draw successors (and, with ``cfg.batch_size``, a random subset of every set)."""
    margins = margin_zeta(env, policy, net, sets.tau) if margins is None else margins
    bs = cfg.batch_size
    dec = _subsample(sets.decrease, bs, rng)
    succ = sample_successors(env, policy, noise, dec, cfg.N, rng) if dec.size else np.zeros((0, cfg.N, env.n))
    c1 = _subsample(sets.points if kind == RSM else sets.c1, bs, rng)
    return LossBatch(c1, dec, succ, _subsample(sets.c3, bs, rng), *loss_margin(kind, margins, cfg))


def martingale_loss(net, kind, sets: TrainingSets, cfg: TrainConfig, env, policy, noise, rng, thresholds=(None, None)):
    """Loss and parameter gradient with fresh successor draws (frozen inside the call)."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if sets.decrease.shape[0] == 0:
        log.warning("no non-terminal points: the loss only has range and tightness terms")
    batch = make_batch(net, kind, sets, cfg, env, policy, noise, rng)
    loss, grad, _ = loss_from_batch(net, kind, batch, cfg, thresholds)
    return loss, grad


# ---------------------------------------------------------------- optimisation

class Adam:
    """Adam on a flat parameter vector with L2 weight decay folded into the gradient."""

    def __init__(self, size, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        g = grad + self.wd * theta
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    terms: list = field(default_factory=list)
    stopped: str = "epochs"


def train_epochs(net: MlpNet, kind, sets: TrainingSets, cfg: TrainConfig, env, policy, noise, rng,
                 thresholds=(None, None), deadline=None, epochs=None, optimizer=None, L_f=None) -> TrainLog:
    """Gradient descent on the martingale loss; the margin is refreshed every epoch."""
    epochs = cfg.epochs if epochs is None else epochs
    opt = optimizer or Adam(net.n_params, cfg.lr, cfg.weight_decay)
    L_f = env.lipschitz_f() if L_f is None else L_f
    out = TrainLog()
    n_dec = sets.decrease.shape[0]
    for ep in range(epochs):
        if deadline is not None and time.monotonic() >= deadline:
            out.stopped = "deadline"
            break
        margins = margin_zeta(env, policy, net, sets.tau, L_f)
        batch = make_batch(net, kind, sets, cfg, env, policy, noise, rng, margins)
        loss, grad, terms = loss_from_batch(net, kind, batch, cfg, thresholds)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite loss at epoch {ep}: {terms}, L_h {net.lipschitz_l1()}")
        out.losses.append(loss)
        out.terms.append(terms)
        if loss == 0.0 and not (cfg.batch_size and n_dec > cfg.batch_size):
            out.stopped = "zero-loss"
            break
        net.set_flat(opt.step(net.get_flat(), grad))
        if ep % 200 == 0:
            log.debug("epoch %d loss %.6g %s L_h %.4g", ep, loss, terms, net.lipschitz_l1())
    return out


def rollout_fit(net: MlpNet, kind, sets: TrainingSets, cfg: TrainConfig, env, policy, noise, rng,
                episodes=4, epochs=None):
    """Warm start: regress the network onto simulated returns from the grid points."""
    pts = sets.points
    ret = np.zeros(pts.shape[0])
    for _ in range(episodes):
        r, _, _ = simulate_returns(env, policy, noise, pts, cfg.horizon, rng)
        ret += r / episodes
    if kind == RSM:
        _, T, _ = simulate_returns(env, policy, noise, pts, cfg.horizon, rng)
        target = 2.0 * cfg.epsilon * T
    else:
        target = ret + 0.5 * (cfg.K + cfg.K_prime)
    opt = Adam(net.n_params, cfg.lr, 0.0)
    for _ in range(cfg.init_epochs if epochs is None else epochs):
        idx = rng.choice(pts.shape[0], min(4096, pts.shape[0]), replace=False)
        resid = None

        def up(h):
            nonlocal resid
            resid = h - target[idx]
            return 2.0 * resid / idx.size

        _, grads = net.value_and_backprop(pts[idx], up)
        net.set_flat(opt.step(net.get_flat(), MlpNet.flatten_grads(grads)))
    return net


def default_thresholds(env, policy, noise, rng, episodes=200, horizon=1000):
    """``(best + 0.1, worst - 0.1)`` over a simulated pre-run from random initial states."""
    starts = env.initial_box.sample(rng, episodes)
    ret, _, trunc = simulate_returns(env, policy, noise, starts, horizon, rng)
    if trunc.any():
        log.warning("%d pre-run episodes did not terminate", trunc.sum())
    return float(ret.max() + 0.1), float(ret.min() - 0.1)


# ---------------------------------------------------------------- certification loop

@dataclass
class RoundRecord:
    iteration: int
    tau: float
    points: int
    loss: float
    train_s: float
    validate_s: float
    verdict: str
    counterexamples: int


def _summarise(kind, net, env, policy, cfg, tau, margins, L_f, status, sh, engine):
    m, D = difference_bound(net, env, policy)
    regime = "sound" if policy.lipschitz_sound or (isinstance(policy, GridPolicy) and policy.action_values.size == 1) \
        else "unsound-at-boundaries"
    cert = Certificate(net=net, kind=kind, status=status, tau=tau, L_f=L_f, L_pi=policy.lipschitz,
                       L_h=net.lipschitz_l1(), m=m, D=D, inflation=margins.inflation,
                       expectation_mode="Analytic" if engine == "analytic" else "OverApprox",
                       lipschitz_regime=regime, system_hash=sh, r_min=env.r_min, r_max=env.r_max)
    if kind == RSM:
        cert.epsilon, cert.a2, cert.b2 = cfg.epsilon, -m, m
    else:
        cert.K, cert.K_prime = cfg.K, cfg.K_prime
        cert.zeta, cert.zeta_prime = margins.zeta, margins.zeta_prime
    return cert


def certify_loop(env: EnvModel, policy, noise: NoiseSpec, kind: str, cfg: TrainConfig, rng=None,
                 net: MlpNet | None = None, on_validate: Callable | None = None,
                 thresholds=None) -> Certificate:
    """Train, validate, and refine the grid on failure until valid or out of time.

    ``on_validate(round, result)`` may replace a validation result; it
    exists so callers can inject counterexamples.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    rng = np.random.default_rng(rng)
    start = time.monotonic()
    deadline = start + 60.0 * cfg.timeout_min
    engine = pick_engine(policy, cfg.engine)
    L_f = env.lipschitz_f()
    sh = system_hash(env, policy, noise)
    if net is None:
        net = MlpNet.init([env.n, *cfg.hidden, 1], act=cfg.activation, rng=rng)
    tau = cfg.tau
    margins = margin_zeta(env, policy, net, tau, L_f)
    if cfg.timeout_min <= 0:
        return _summarise(kind, net, env, policy, cfg, tau, margins, L_f, "Unknown", sh, engine)
    if thresholds is None:
        thresholds = (cfg.u_bar, cfg.l_bar)
        if kind != RSM and None in thresholds:
            u, l = default_thresholds(env, policy, noise, rng, cfg.pre_run_episodes, cfg.horizon)
            thresholds = (u if cfg.u_bar is None else cfg.u_bar, l if cfg.l_bar is None else cfg.l_bar)
    disc = build_grid(env.state_box, tau, cfg.point_budget)
    sets = classify_grid(disc, env)
    if cfg.init == "rollout":
        rollout_fit(net, kind, sets, cfg, env, policy, noise, rng)
    rounds, train_s, val_s = [], 0.0, 0.0
    opt = Adam(net.n_params, cfg.lr, cfg.weight_decay)
    last = None
    status = "Unknown"
    it = 0
    while True:
        t0 = time.monotonic()
        tlog = train_epochs(net, kind, sets, cfg, env, policy, noise, rng, thresholds, deadline,
                            optimizer=opt, L_f=L_f)
        t1 = time.monotonic()
        margins = margin_zeta(env, policy, net, tau, L_f)
        res = validate(net, kind, sets, env, policy, noise, tau=tau, K=cfg.K, K_prime=cfg.K_prime,
                       epsilon=cfg.epsilon, engine=engine, k=cfg.k_cells, weighting=cfg.weighting, L_f=L_f,
                       min_width=tau)
        if on_validate is not None:
            res = on_validate(it, res)
        t2 = time.monotonic()
        train_s += t1 - t0
        val_s += t2 - t1
        last = res
        rounds.append(RoundRecord(it, tau, int(sets.points.shape[0]),
                                  float(tlog.losses[-1]) if tlog.losses else float("nan"),
                                  t1 - t0, t2 - t1, res.verdict, len(res.counterexamples)))
        log.info("round %d tau %.5g points %d loss %s verdict %s (%d counterexamples, worst slack %s)",
                 it, tau, sets.points.shape[0], rounds[-1].loss, res.verdict, len(res.counterexamples),
                 res.details.get("worst_slack"))
        if res.valid:
            status = "Validated"
            break
        it += 1
        if time.monotonic() >= deadline or (cfg.max_rounds is not None and it >= cfg.max_rounds):
            break
        try:
            disc = refine_grid(disc, cfg.xi, res.counterexample_points(), cfg.point_budget)
        except ValueError as exc:
            log.warning("stopping: %s", exc)
            break
        tau = disc.tau
        sets = classify_grid(disc, env)
    cert = _summarise(kind, net, env, policy, cfg, tau, margins, L_f, status, sh, engine)
    cert.rounds = [dataclasses.asdict(r) for r in rounds]
    cert.train_s, cert.validate_s = train_s, val_s
    if last is not None and not last.valid:
        cert.counterexamples = [dataclasses.asdict(c) for c in last.counterexamples[:1000]]
    return cert
