"""Monte-Carlo rollouts of the perturbed loop and comparison against certified bounds."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel
from .core import Episode, NoiseSpec, sample_noise
from .env import EnvModel

log = logging.getLogger(__name__)

MIN_HORIZON = 1000


def default_horizon(t_estimate=None) -> int:
    if t_estimate is None:
        return MIN_HORIZON
    return max(MIN_HORIZON, int(math.ceil(10 * t_estimate)))


def rollout(env: EnvModel, policy, noise: NoiseSpec, s0, max_steps: int, rng) -> Episode:
    """Run one perturbed episode; ``rewards[0]`` is 0 by convention."""
    s = np.asarray(s0, dtype=np.float64).reshape(1, -1)
    states, rewards = [s[0].copy()], [0.0]
    clamped = False
    term = None
    if env.is_terminal(s)[0]:
        return Episode(np.array(states), np.array(rewards), 0, False)
    for t in range(1, max_steps + 1):
        d = sample_noise(noise, rng, 1)
        a = policy.act(s + d)
        s, r, c = env.step(s, a)
        clamped |= bool(c[0])
        states.append(s[0].copy())
        rewards.append(float(r[0]))
        if env.is_terminal(s)[0]:
            term = t
            break
    return Episode(np.array(states), np.array(rewards), term, clamped)


def simulate_returns(env: EnvModel, policy, noise: NoiseSpec, starts, max_steps: int, rng):
    """Vectorised episodes from each row of ``starts``.

    Returns ``(returns, steps, truncated)``; ``steps`` is the termination
    time, or ``max_steps`` for truncated episodes.
    """
    s = np.atleast_2d(np.asarray(starts, dtype=np.float64)).copy()
    E = s.shape[0]
    total = np.zeros(E)
    steps = np.zeros(E, dtype=np.int64)
    done = env.is_terminal(s)
    for _ in range(max_steps):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        d = sample_noise(noise, rng, live.size)
        a = policy.act(s[live] + d)
        nxt, r, _ = env.step(s[live], a)
        s[live] = nxt
        total[live] += r
        steps[live] += 1
        done[live] = env.is_terminal(nxt)
    return total, steps, ~done


@dataclass
class StateStats:
    state: list
    episodes: int
    mean: float
    std: float
    se: float
    mean_T: float
    max_T: int
    truncated: int


@dataclass
class SimStats:
    per_state: list
    returns: list = field(repr=False, default_factory=list)
    truncated: list = field(repr=False, default_factory=list)
    steps: list = field(repr=False, default_factory=list)

    def pooled(self, state_index=None):
        """Non-truncated returns, pooled over states unless one is selected."""
        idx = range(len(self.returns)) if state_index is None else [state_index]
        return np.concatenate([self.returns[i][~self.truncated[i]] for i in idx])

    def pooled_steps(self, state_index=None):
        idx = range(len(self.steps)) if state_index is None else [state_index]
        return np.concatenate([self.steps[i][~self.truncated[i]] for i in idx])

    def to_json(self):
        return [asdict(s) for s in self.per_state]


def _state_job(args):
    env, policy, noise, s0, episodes, max_steps, seed = args
    rng = np.random.default_rng(seed)
    return simulate_returns(env, policy, noise, np.repeat(np.atleast_2d(s0), episodes, axis=0), max_steps, rng)


def estimate_stats(env: EnvModel, policy, noise: NoiseSpec, initial_states, episodes: int = 200,
                   max_steps: int | None = None, seed=0, workers: int = 1) -> SimStats:
    """Independent rollouts per initial state with per-state derived seeds.

    Results depend only on ``seed``, not on ``workers``.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    max_steps = default_horizon() if max_steps is None else max_steps
    states = np.atleast_2d(np.asarray(initial_states, dtype=np.float64))
    seeds = np.random.SeedSequence(seed).spawn(states.shape[0])
    jobs = [(env, policy, noise, s, episodes, max_steps, sd) for s, sd in zip(states, seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_state_job, jobs))
    else:
        results = [_state_job(j) for j in jobs]
    per, rets, truncs, steps = [], [], [], []
    for s, (ret, T, trunc) in zip(states, results):
        if trunc.any():
            log.warning("%d of %d episodes from %s hit the %d-step horizon", trunc.sum(), episodes, s, max_steps)
        std = float(ret.std(ddof=1)) if episodes > 1 else 0.0
        per.append(StateStats(s.tolist(), episodes, float(ret.mean()), std, std / math.sqrt(episodes),
                              float(T.mean()), int(T.max()), int(trunc.sum())))
        rets.append(ret)
        truncs.append(trunc)
        steps.append(T)
    return SimStats(per, rets, truncs, steps)


def tail_frequencies(returns, thresholds) -> np.ndarray:
    """Empirical ``P(R >= c)`` for each threshold ``c``."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        return np.full(len(thresholds), np.nan)
    return _accel.tail_counts(r, np.asarray(thresholds, dtype=np.float64)) / r.size


def termination_survival(steps, horizon) -> np.ndarray:
    """Empirical ``P(T > n)`` for ``n = 0..horizon``."""
    steps = np.asarray(steps)
    return np.array([(steps > n).mean() for n in range(horizon + 1)])


def enclosure_report(stats: SimStats, bounds, tails=()) -> dict:
    """Pass/fail per state (3 SE slack on the mean) and per tail point (3 binomial SE).

    ``bounds`` is a sequence of ``(lower, upper)`` pairs or objects with
    ``lower``/``upper``; ``tails`` is a sequence of ``(c, bound, empirical, episodes)``.
    """
    rows = []
    for st, b in zip(stats.per_state, bounds):
        lo, up = (b.lower, b.upper) if hasattr(b, "lower") else b
        ok = lo - 3 * st.se <= st.mean <= up + 3 * st.se
        rows.append({"state": st.state, "mean": st.mean, "std": st.std, "se": st.se,
                     "lower": lo, "upper": up, "gap": up - lo, "pass": bool(ok)})
    trows = []
    for c, bound, freq, n in tails:
        se = math.sqrt(max(freq * (1 - freq), 0.0) / n) if n else 0.0
        trows.append({"c": c, "bound": bound, "empirical": freq, "se": se, "pass": bool(freq <= bound + 3 * se)})
    return {"states": rows, "tails": trows,
            "state_pass": sum(r["pass"] for r in rows), "state_total": len(rows),
            "tail_pass": sum(r["pass"] for r in trows), "tail_total": len(trows),
            "all_pass": all(r["pass"] for r in rows) and all(r["pass"] for r in trows)}
