"""Expected-reward bounds, termination concentration constants and tail bounds from certificates."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .learn import LRS, RSM, URS, Certificate

# Caveats about the tail-bound formula, carried into every report.
TAIL_NOTES = (
    "beta and gamma use a single-step Hoeffding range (b'-a')^2 rather than one scaled by the horizon",
    "the step replacing exp(-2 lambda^2/w^2) by beta*exp(-gamma c^2) holds only for c <= 1.5 (h0 - K)",
    "a' and b' use the symmetric interval [-m + r_max, m + r_max] for both directions",
)


@dataclass
class RewardBounds:
    s0: list
    upper: float | None
    lower: float | None
    urs_hash: str = ""
    lrs_hash: str = ""

    @property
    def gap(self):
        return None if self.upper is None or self.lower is None else self.upper - self.lower


def _require_valid(cert, kind):
    if cert is None:
        return
    if cert.kind != kind:
        raise ValueError(f"expected a {kind} certificate, got {cert.kind}")
    if not cert.validated:
        raise ValueError(f"{kind} certificate is not validated (status {cert.status})")


def reward_bounds(urs: Certificate | None, lrs: Certificate | None, s0) -> RewardBounds:
    """Upper ``h_URS(s0) - K`` and lower ``h_LRS(s0) - K'`` on the expected cumulative reward."""
    _require_valid(urs, URS)
    _require_valid(lrs, LRS)
    if urs is not None and lrs is not None and urs.system_hash != lrs.system_hash:
        raise ValueError("certificates were built for different systems")
    s0 = np.asarray(s0, dtype=np.float64).reshape(1, -1)
    up = None if urs is None else float(urs.net.value(s0)[0] - urs.K)
    lo = None if lrs is None else float(lrs.net.value(s0)[0] - lrs.K_prime)
    return RewardBounds(s0[0].tolist(), up, lo, urs.system_hash if urs else "", lrs.system_hash if lrs else "")


# ---------------------------------------------------------------- concentration

def concentration_from_values(epsilon, eta0, a2, b2):
    """``(a, b)`` with ``P(T > n) <= a exp(-b n)`` for ``n > eta0 / epsilon``."""
    w = b2 - a2
    if not w > 0:
        raise ValueError("difference interval must have positive width")
    return math.exp(2.0 * epsilon * eta0 / w ** 2), 2.0 * epsilon ** 2 / w ** 2


def default_n_star(a, b, eta0, epsilon, alpha_target=1e-3, cap=1_000_000) -> int:
    """Smallest admissible horizon with ``a exp(-b n) <= alpha_target``, capped."""
    first = math.floor(eta0 / epsilon) + 1
    need = math.ceil((math.log(a) - math.log(alpha_target)) / b)
    return int(min(max(first, need), cap))


def concentration_constants(rsm: Certificate, s0, n_star=None):
    """``(a, b, alpha, n_star)`` for a validated RSM at ``s0``."""
    _require_valid(rsm, RSM)
    eta0 = float(rsm.net.value(np.atleast_2d(s0))[0])
    a, b = concentration_from_values(rsm.epsilon, eta0, rsm.a2, rsm.b2)
    if n_star is None:
        n_star = default_n_star(a, b, eta0, rsm.epsilon)
    if not n_star > eta0 / rsm.epsilon:
        raise ValueError(f"n_star={n_star} must exceed eta(s0)/epsilon={eta0 / rsm.epsilon}")
    return a, b, a * math.exp(-b * n_star), n_star


# ---------------------------------------------------------------- tails

def tail_constants(h0, bound_const, m, r_max):
    """``(a', b', beta, gamma)`` for a martingale value ``h0`` and terminal constant ``K`` (or ``K'``)."""
    a1, b1 = -m + r_max, m + r_max
    w2 = (b1 - a1) ** 2
    if not w2 > 0:
        raise ValueError("difference bound m must be positive for a tail bound")
    log_beta = 4.0 * (h0 - bound_const) ** 2 / w2
    return a1, b1, math.exp(log_beta) if log_beta < 700 else math.inf, 2.0 / w2


@dataclass
class TailParams:
    a: float
    b: float
    n_star: int
    alpha: float
    beta: float
    gamma: float
    a_prime: float
    b_prime: float
    threshold: float
    direction: str
    notes: tuple = field(default=TAIL_NOTES)


def tail_params(cert: Certificate, rsm: Certificate, s0, n_star=None) -> TailParams:
    if cert.kind not in (URS, LRS):
        raise ValueError("tail bounds need a URS or LRS certificate")
    _require_valid(cert, cert.kind)
    a, b, alpha, n_star = concentration_constants(rsm, s0, n_star)
    h0 = float(cert.net.value(np.atleast_2d(s0))[0])
    const = cert.K if cert.kind == URS else cert.K_prime
    a1, b1, beta, gamma = tail_constants(h0, const, cert.m, cert.r_max)
    return TailParams(a, b, n_star, alpha, beta, gamma, a1, b1, h0 - const,
                      ">=" if cert.kind == URS else "<=")


def _log_add_exp(x, y):
    hi = max(x, y)
    if hi == -math.inf:
        return -math.inf
    return hi + math.log(math.exp(x - hi) + math.exp(y - hi))


def tail_value(params: TailParams, c):
    """``(clipped, raw)`` bound on ``P(R >= c)`` (URS) or ``P(R <= c)`` (LRS)."""
    if params.direction == ">=" and not c > params.threshold:
        raise ValueError(f"c={c} not beyond certified bound {params.threshold}")
    if params.direction == "<=" and not c < params.threshold:
        raise ValueError(f"c={c} not beyond certified bound {params.threshold}")
    log_alpha = math.log(params.alpha) if params.alpha > 0 else -math.inf
    # log(beta) = 2 gamma (h0 - K)^2 stays finite when beta itself overflows
    log_beta = 2.0 * params.gamma * params.threshold ** 2
    log_raw = _log_add_exp(log_alpha, log_beta - params.gamma * c * c)
    raw = math.exp(log_raw) if log_raw < 700 else math.inf
    return min(1.0, raw), raw


def tail_bound(cert: Certificate, rsm: Certificate, s0, c, n_star=None) -> float:
    """Certified tail probability for cumulative reward beyond ``c``, clipped to [0, 1]."""
    return tail_value(tail_params(cert, rsm, s0, n_star), c)[0]


# ---------------------------------------------------------------- CSV output

def fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if not isinstance(x, str) else x


def _g17(x):
    return "" if x is None else format(float(x), ".17g")


def write_bounds_csv(path, rows):
    """Rows of :class:`RewardBounds`; columns ``s0_0..s0_{n-1}, lower, upper``."""
    rows = list(rows)
    n = len(rows[0].s0) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"s0_{i}" for i in range(n)] + ["lower", "upper"])
        for r in rows:
            w.writerow([_g17(v) for v in r.s0] + [_g17(r.lower), _g17(r.upper)])


def write_tail_csv(path, rows):
    """Rows of ``(c, bound, empirical_freq)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "bound", "empirical_freq"])
        for c, b, f in rows:
            w.writerow([_g17(c), _g17(b), _g17(f)])
