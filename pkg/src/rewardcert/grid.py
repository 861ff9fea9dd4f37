"""Uniform state-space grids with a guaranteed L1 covering radius, and training-set classification."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .core import Box

log = logging.getLogger(__name__)

DEFAULT_POINT_BUDGET = 2_000_000


@dataclass(frozen=True, eq=False)
class Discretization:
    """Grid points covering ``space`` within L1 distance ``tau``, plus injected extras."""

    tau: float
    space: Box
    axes: tuple          # per-dimension coordinate arrays of the regular grid
    extra: np.ndarray    # (E, n) counterexample points carried across refinements

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] if a.size > 1 else 0.0 for a in self.axes])

    @property
    def grid_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)

    @property
    def points(self) -> np.ndarray:
        g = self.grid_points
        if self.extra.shape[0] == 0:
            return g
        return np.unique(np.concatenate([g, self.extra]), axis=0)

    def __len__(self):
        return self.points.shape[0]


def grid_axes(space: Box, tau: float):
    n = space.dim
    step = 2.0 * tau / n
    axes = []
    for lo, hi in zip(space.lo, space.hi):
        w = hi - lo
        count = int(np.ceil(w / step - 1e-9)) + 1 if w > 0 else 1
        axes.append(np.linspace(lo, hi, count))
    return tuple(axes)


def build_grid(space: Box, tau: float, budget: int = DEFAULT_POINT_BUDGET) -> Discretization:
    """Regular grid with per-axis spacing at most ``2 tau / n`` (endpoints included)."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    axes = grid_axes(space, tau)
    count = int(np.prod([a.size for a in axes], dtype=np.float64))
    if count > budget:
        raise ValueError(f"grid at tau={tau} needs {count} points, over the budget of {budget}; "
                         "raise the point budget or use a larger tau")
    return Discretization(float(tau), space, axes, np.zeros((0, space.dim)))


def refine_grid(disc: Discretization, xi: float, counterexamples=(),
                budget: int = DEFAULT_POINT_BUDGET) -> Discretization:
    """Shrink the covering radius by ``xi`` and union the new grid with counterexamples."""
    if not 0 < xi:
        raise ValueError("xi must be positive")
    new_tau = disc.tau - xi
    if new_tau <= 0:
        raise ValueError(f"refinement exhausted: tau {disc.tau} - xi {xi} <= 0")
    cex = np.asarray(counterexamples, dtype=np.float64).reshape(-1, disc.space.dim)
    cex = disc.space.clip(cex) if cex.size else cex
    extra = np.unique(np.concatenate([disc.extra, cex]), axis=0)
    fresh = build_grid(disc.space, new_tau, budget)
    return Discretization(fresh.tau, fresh.space, fresh.axes, extra)


@dataclass(frozen=True, eq=False)
class TrainingSets:
    """Grid points split by terminal-region and initial-box membership.

    ``shell`` holds terminal points whose tau-neighbourhood reaches
    non-terminal states; decrease conditions are imposed there too so that
    grid checks extend to every non-terminal state.
    """

    points: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray
    shell: np.ndarray
    tau: float

    @property
    def decrease(self) -> np.ndarray:
        """Points at which the expected-decrease condition is enforced."""
        if self.shell.shape[0] == 0:
            return self.c2
        return np.concatenate([self.c2, self.shell])


def _deep_inside(points, tau, boxes, space: Box):
    """Points whose L-infinity tau-box (intersected with S) lies inside one terminal box.

    Box faces lying on the boundary of S are treated as open to infinity,
    because nothing beyond S is ever reached.
    """
    lo = np.maximum(points - tau, space.lo)
    hi = np.minimum(points + tau, space.hi)
    deep = np.zeros(points.shape[0], dtype=bool)
    for b in boxes:
        blo = np.where(b.lo <= space.lo, -np.inf, b.lo)
        bhi = np.where(b.hi >= space.hi, np.inf, b.hi)
        deep |= np.all((lo >= blo) & (hi <= bhi), axis=1)
    return deep


def classify_grid(disc: Discretization, env) -> TrainingSets:
    pts = disc.points
    if pts.size and not np.all(disc.space.contains(pts)):
        raise ValueError("grid points must lie in the state space")
    term = env.is_terminal(pts)
    if not term.any() and env.terminal_boxes:
        warnings.warn("no grid point lies in the terminal region; adding one anchor per terminal box",
                      stacklevel=2)
        anchors = np.stack([b.center for b in env.terminal_boxes])
        pts = np.concatenate([pts, anchors])
        term = env.is_terminal(pts)
    init = env.initial_box.contains(pts)
    if not init.any() and disc.space.contains(env.initial_box.center[None])[0]:
        pts = np.concatenate([pts, env.initial_box.center[None]])
        term = np.append(term, False)
        init = np.append(init, True)
    c1 = pts[term]
    shell = c1[~_deep_inside(c1, disc.tau, env.terminal_boxes, env.state_box)]
    return TrainingSets(points=pts, c1=c1, c2=pts[~term], c3=pts[init], shell=shell, tau=disc.tau)


def covering_radius_estimate(disc: Discretization, samples: np.ndarray) -> float:
    """Largest L1 distance from any sample to its nearest regular-grid point."""
    idx = []
    for j, ax in enumerate(disc.axes):
        if ax.size == 1:
            idx.append(np.zeros(samples.shape[0], dtype=int))
            continue
        step = ax[1] - ax[0]
        idx.append(np.clip(np.rint((samples[:, j] - ax[0]) / step).astype(int), 0, ax.size - 1))
    nearest = np.stack([disc.axes[j][i] for j, i in enumerate(idx)], axis=1)
    return float(np.abs(samples - nearest).sum(axis=1).max())
