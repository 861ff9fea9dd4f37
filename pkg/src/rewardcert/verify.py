"""Sound validation of candidate martingales.

Boundedness on the terminal region is certified by interval propagation
with box bisection.  Expected-decrease conditions are checked at grid
points with Lipschitz margins that extend them to every state within the
grid's covering radius.  Two engines bound the expectation over noise:
a cell-wise over-approximation (any policy) and exact action masses
(piecewise-constant grid policies).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Box, NoiseCells, NoiseSpec, partition_noise_support
from .env import EnvModel, GridPolicy

URS, LRS, RSM = "URS", "LRS", "RSM"
KINDS = (URS, LRS, RSM)
MASS_TOL = 1e-9
CHUNK = 8192
MAX_SUCCESSOR_CEX = 2000


# ---------------------------------------------------------------- results

@dataclass
class Counterexample:
    point: list
    condition: str
    slack: float
    successor: list | None = None


@dataclass
class ValidationResult:
    verdict: str = "Valid"
    counterexamples: list = field(default_factory=list)
    checked: int = 0
    details: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.verdict == "Valid"

    def add(self, cex: Counterexample):
        self.counterexamples.append(cex)
        self.verdict = "Invalid"

    def merge(self, other: "ValidationResult") -> "ValidationResult":
        out = ValidationResult("Valid" if self.valid and other.valid else "Invalid",
                               self.counterexamples + other.counterexamples,
                               self.checked + other.checked, {**self.details, **other.details})
        return out

    def counterexample_points(self) -> np.ndarray:
        pts = []
        for c in self.counterexamples:
            pts.append(c.point)
            if c.successor is not None:
                pts.append(c.successor)
        return np.asarray(pts, dtype=np.float64)

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "checked": self.checked, "details": self.details,
                "counterexamples": [asdict(c) for c in self.counterexamples]}


# ---------------------------------------------------------------- margins

@dataclass(frozen=True)
class MarginReport:
    zeta: float
    zeta_prime: float
    inflation: float
    r_max: float
    r_min: float
    tau: float
    L_h: float
    L_f: float
    L_pi: float


def zeta_margins(r_max, r_min, tau, L_h, L_f, L_pi) -> MarginReport:
    """Decrease margins that lift grid-point checks to all states within ``tau``."""
    inflation = tau * L_h * (1.0 + L_f * (1.0 + L_pi))
    return MarginReport(r_max + inflation, r_min - inflation, inflation,
                        r_max, r_min, tau, L_h, L_f, L_pi)


def margin_zeta(env: EnvModel, policy, net, tau, L_f=None) -> MarginReport:
    L_f = env.lipschitz_f() if L_f is None else L_f
    return zeta_margins(env.r_max, env.r_min, tau, net.lipschitz_l1(), L_f, policy.lipschitz)


def difference_bound(net, env: EnvModel, policy=None, displacement=None):
    """``m = L_h * D`` with ``D`` a sound bound on the one-step L1 displacement.

    ``D`` ranges over every action, so it also covers perturbed steps.
    Returns ``(m, D)``.
    """
    D = env.displacement_bound() if displacement is None else displacement
    return net.lipschitz_l1() * D, D


# ---------------------------------------------------------------- boundedness

def check_range(net, boxes, lower=-np.inf, upper=np.inf, min_width=None,
                max_boxes=400_000, label="bounded") -> ValidationResult:
    """Certify ``lower <= net <= upper`` on a union of boxes by IBP with bisection.

    Boxes failing IBP are halved along their widest side until they are
    narrower than ``min_width``; remaining failures become counterexamples
    at the worst of their corners and centre.
    """
    res = ValidationResult(details={})
    boxes = list(boxes)
    if not boxes:
        return res
    lo = np.stack([b.lo for b in boxes]).astype(np.float64)
    hi = np.stack([b.hi for b in boxes]).astype(np.float64)
    if min_width is None:
        min_width = 0.0
    processed = 0
    while lo.shape[0]:
        if processed > max_boxes:
            res.details[f"{label}_budget_exhausted"] = True
            for a, b in zip(lo, hi):
                _range_cex(net, a, b, lower, upper, res, label)
            break
        ilo, ihi = _ibp_chunks(net, lo, hi)
        processed += lo.shape[0]
        bad = (ihi > upper) | (ilo < lower)
        lo, hi, ilo, ihi = lo[bad], hi[bad], ilo[bad], ihi[bad]
        if not lo.shape[0]:
            break
        width = hi - lo
        wide = width.max(axis=1) > min_width
        for a, b in zip(lo[~wide], hi[~wide]):
            _range_cex(net, a, b, lower, upper, res, label)
        lo, hi, width = lo[wide], hi[wide], width[wide]
        axis = width.argmax(axis=1)
        rows = np.arange(lo.shape[0])
        mid = 0.5 * (lo[rows, axis] + hi[rows, axis])
        hi_left = hi.copy()
        hi_left[rows, axis] = mid
        lo_right = lo.copy()
        lo_right[rows, axis] = mid
        lo = np.concatenate([lo, lo_right])
        hi = np.concatenate([hi_left, hi])
    res.checked = processed
    return res


def _ibp_chunks(net, lo, hi):
    outs_lo, outs_hi = [], []
    for i in range(0, lo.shape[0], CHUNK):
        a, b = net.propagate_interval(lo[i:i + CHUNK], hi[i:i + CHUNK])
        outs_lo.append(a[:, 0])
        outs_hi.append(b[:, 0])
    return np.concatenate(outs_lo), np.concatenate(outs_hi)


def _range_cex(net, lo, hi, lower, upper, res, label):
    n = lo.shape[0]
    if n <= 6:
        corners = np.array(np.meshgrid(*[[lo[j], hi[j]] for j in range(n)], indexing="ij")).reshape(n, -1).T
    else:
        corners = np.stack([lo, hi])
    cand = np.concatenate([corners, 0.5 * (lo + hi)[None]])
    v = net.value(cand)
    viol = np.maximum(v - upper, lower - v)
    i = int(viol.argmax())
    ilo, ihi = net.propagate_interval(lo, hi)
    slack = float(max(ihi[0, 0] - upper, lower - ilo[0, 0]))
    res.add(Counterexample(cand[i].tolist(), label, slack))


def check_boundedness(net, terminal_boxes, K, K_prime, min_width=None, **kw) -> ValidationResult:
    """``K <= h <= K'`` on every terminal box."""
    return check_range(net, terminal_boxes, K, K_prime, min_width, label="bounded", **kw)


# ---------------------------------------------------------------- expectation engines

def _h_at_successors(net, env, states, actions):
    """Interval enclosure of h at the clamped successor of point states."""
    nlo, nhi = env.successor_interval(states, states, actions, actions)
    return _ibp_chunks(net, nlo, nhi)


def _obs_boxes(states, cells: NoiseCells):
    lo = (states[:, None, :] + cells.lo[None]).reshape(-1, states.shape[1])
    hi = (states[:, None, :] + cells.hi[None]).reshape(-1, states.shape[1])
    return lo, hi


def cell_bounds(net, env: EnvModel, policy, states, cells: NoiseCells):
    """``(inf, sup)`` of ``h(f(s, pi(s + delta)))`` over each noise cell, shape ``(B, C)``."""
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    B, C = s.shape[0], cells.count
    olo, ohi = _obs_boxes(s, cells)
    if env.discrete:
        nA = env.action_space.n
        hlo = np.empty((B, nA))
        hhi = np.empty((B, nA))
        for a in range(nA):
            hlo[:, a], hhi[:, a] = _h_at_successors(net, env, s, np.full(B, float(a)))
        possible = np.concatenate([policy.possible_actions(olo[i:i + CHUNK], ohi[i:i + CHUNK])
                                   for i in range(0, olo.shape[0], CHUNK)]).reshape(B, C, nA)
        sup = np.where(possible, hhi[:, None, :], -np.inf).max(axis=2)
        inf = np.where(possible, hlo[:, None, :], np.inf).min(axis=2)
        return inf, sup
    a_lo, a_hi = policy.action_bounds(olo, ohi)
    rep = np.repeat(s, C, axis=0)
    nlo, nhi = env.successor_interval(rep, rep, a_lo, a_hi)
    ilo, ihi = _ibp_chunks(net, nlo, nhi)
    return ilo.reshape(B, C), ihi.reshape(B, C)


def _weighted(values, cells: NoiseCells, side, weighting):
    if weighting == "mass":
        return values @ cells.mass
    if weighting != "volume":
        raise ValueError(f"unknown weighting {weighting!r}")
    # every cell's probability lies in [minmass, maxmass]; pick the endpoint that
    # keeps each term on the safe side of its sign
    hi_w = np.where(values >= 0, cells.maxmass, cells.minmass)
    lo_w = np.where(values >= 0, cells.minmass, cells.maxmass)
    return (values * (hi_w if side == "upper" else lo_w)).sum(axis=1)


def expectation_bound(net, env: EnvModel, policy, noise: NoiseSpec, states, cells: NoiseCells | None = None,
                      side="upper", weighting="volume", k=10) -> np.ndarray:
    """Cell-wise bound on ``E_delta h(f(s, pi(s + delta)))`` for each state.

    ``weighting='volume'`` multiplies each cell's sup (inf) by the largest
    (smallest) cell probability, sign-aware; ``'mass'`` uses exact cell
    probabilities.
    """
    side = side.lower()
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    cells = partition_noise_support(noise, k) if cells is None else cells
    if not (np.allclose(cells.lo.min(axis=0), noise.support().lo)
            and np.allclose(cells.hi.max(axis=0), noise.support().hi)):
        raise ValueError("noise cells do not cover the noise support")
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    out = np.empty(s.shape[0])
    step = max(1, CHUNK // max(cells.count, 1))
    for i in range(0, s.shape[0], step):
        inf, sup = cell_bounds(net, env, policy, s[i:i + step], cells)
        out[i:i + step] = _weighted(sup if side == "upper" else inf, cells, side, weighting)
    return out


def expectation_analytic(net, env: EnvModel, policy: GridPolicy, noise: NoiseSpec, states,
                         side=None, return_mass=False):
    """Exact expectation over noise for a piecewise-constant grid policy.

    Each action's probability is the noise mass of the cells using it.  With
    ``side`` set, h at each successor is replaced by its interval bound so
    that rounding in the network cannot flip a verdict.
    """
    if not isinstance(policy, GridPolicy):
        raise TypeError("the analytic engine needs a grid policy")
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    values = policy.action_values
    out = np.empty(s.shape[0])
    total = np.empty(s.shape[0])
    for i in range(0, s.shape[0], CHUNK):
        blk = s[i:i + CHUNK]
        mass = policy.action_masses(noise, blk)
        hv = np.empty_like(mass)
        for j, v in enumerate(values):
            if side is None:
                nxt, _ = env.successor(blk, np.full(blk.shape[0], v))
                hv[:, j] = net.value(nxt)
            else:
                lo, hi = _h_at_successors(net, env, blk, np.full(blk.shape[0], v))
                hv[:, j] = hi if side == "upper" else lo
        # zero-mass actions must not contribute even if h is huge there
        out[i:i + CHUNK] = np.where(mass > 0, mass * hv, 0.0).sum(axis=1)
        total[i:i + CHUNK] = mass.sum(axis=1)
    if np.any(np.abs(total - 1.0) > MASS_TOL):
        raise ValueError(f"action masses sum to {total.min()}..{total.max()}, not 1")
    return (out, total) if return_mass else out


# ---------------------------------------------------------------- pre-expectation

def pick_engine(policy, engine="auto") -> str:
    if engine == "auto":
        return "analytic" if isinstance(policy, GridPolicy) else "overapprox"
    if engine not in ("analytic", "overapprox"):
        raise ValueError(f"unknown expectation engine {engine!r}")
    if engine == "analytic" and not isinstance(policy, GridPolicy):
        raise ValueError("the analytic engine needs a grid policy")
    return engine


def expected_h(net, env, policy, noise, states, side, engine="auto", cells=None, weighting="volume", k=10):
    engine = pick_engine(policy, engine)
    if engine == "analytic":
        return expectation_analytic(net, env, policy, noise, states, side=side)
    return expectation_bound(net, env, policy, noise, states, cells, side, weighting, k)


def check_pre_expectation(net, kind, points, env: EnvModel, policy, noise: NoiseSpec, *, tau,
                          epsilon=None, engine="auto", k=10, weighting="volume", L_f=None,
                          margins: MarginReport | None = None) -> ValidationResult:
    """Grid-point decrease (URS, RSM) or increase (LRS) condition with Lipschitz margin.

    ``points`` are evaluated with the non-absorbing successor, so terminal
    points near the terminal boundary may be included.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown certificate kind {kind!r}")
    if kind == RSM and epsilon is None:
        raise ValueError("RSM validation needs epsilon")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64)).reshape(-1, env.n)
    margins = margin_zeta(env, policy, net, tau, L_f) if margins is None else margins
    res = ValidationResult(details={"margins": asdict(margins), "engine": pick_engine(policy, engine)})
    res.checked = pts.shape[0]
    if pts.shape[0] == 0:
        return res
    cells = partition_noise_support(noise, k)
    hlo, hhi = _ibp_chunks(net, pts, pts)
    if kind == LRS:
        e = expected_h(net, env, policy, noise, pts, "lower", engine, cells, weighting, k)
        slack = hhi - margins.zeta_prime - e
    else:
        e = expected_h(net, env, policy, noise, pts, "upper", engine, cells, weighting, k)
        target = margins.zeta if kind == URS else epsilon + margins.inflation
        slack = e - (hlo - target)
    res.details["worst_slack"] = float(slack.max())
    fail = np.flatnonzero(slack > 0)
    res.details["failures"] = int(fail.size)
    if fail.size:
        # every failing point is reported; successors only for the worst ones
        worst = fail[np.argsort(-slack[fail], kind="stable")[:MAX_SUCCESSOR_CEX]]
        succ = dict(zip(worst.tolist(), worst_successors(net, env, policy, pts[worst], cells,
                                                          maximise=(kind != LRS))))
        for j in fail:
            s = succ.get(int(j))
            res.add(Counterexample(pts[j].tolist(), f"{kind}-expectation", float(slack[j]),
                                   None if s is None else s.tolist()))
    return res


def worst_successors(net, env, policy, states, cells: NoiseCells, maximise=True) -> np.ndarray:
    """Successor at the noise-cell midpoint that is worst for the certificate."""
    mid = 0.5 * (cells.lo + cells.hi)
    s = np.atleast_2d(states)
    C = mid.shape[0]
    out = []
    step = max(1, CHUNK // C)
    for i in range(0, s.shape[0], step):
        blk = s[i:i + step]
        B = blk.shape[0]
        obs = (blk[:, None, :] + mid[None]).reshape(-1, s.shape[1])
        nxt, _ = env.successor(np.repeat(blk, C, axis=0), policy.act(obs))
        v = net.value(nxt).reshape(B, C)
        pick = v.argmax(axis=1) if maximise else v.argmin(axis=1)
        out.append(nxt.reshape(B, C, -1)[np.arange(B), pick])
    return np.concatenate(out) if out else np.zeros((0, s.shape[1]))


def check_nonnegative(net, state_box: Box, min_width=None, **kw) -> ValidationResult:
    return check_range(net, [state_box], 0.0, np.inf, min_width, label="nonnegative", **kw)


def validate(net, kind, sets, env, policy, noise, *, tau, K=None, K_prime=None, epsilon=None,
             engine="auto", k=10, weighting="volume", L_f=None, min_width=None) -> ValidationResult:
    """Full check for one candidate: range condition plus grid decrease condition."""
    min_width = tau if min_width is None else min_width
    if kind == RSM:
        rng_res = check_nonnegative(net, env.state_box, min_width=min_width)
    else:
        rng_res = check_boundedness(net, env.terminal_boxes, K, K_prime, min_width=min_width)
    pre = check_pre_expectation(net, kind, sets.decrease, env, policy, noise, tau=tau, epsilon=epsilon,
                                engine=engine, k=k, weighting=weighting, L_f=L_f)
    return rng_res.merge(pre)
