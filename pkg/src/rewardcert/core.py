"""State boxes, perturbation laws and the measure utilities built on them."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.special import ndtr, ndtri


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Box:
    """Closed axis-aligned box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.lo), _frozen(self.hi)
        if lo.shape != hi.shape:
            raise ValueError(f"box bounds differ in dimension: {lo.shape} vs {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError(f"box has lo > hi: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def volume(self) -> float:
        return float(np.prod(self.width))

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)

    def clip(self, points) -> np.ndarray:
        return np.clip(points, self.lo, self.hi)

    def intersect(self, other: "Box") -> "Box | None":
        lo = np.maximum(self.lo, other.lo)
        hi = np.minimum(self.hi, other.hi)
        if np.any(lo > hi):
            return None
        return Box(lo, hi)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def __eq__(self, other):
        return isinstance(other, Box) and np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))

    def __repr__(self):
        return f"Box(lo={self.lo.tolist()}, hi={self.hi.tolist()})"

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, obj) -> "Box":
        return cls(obj["lo"], obj["hi"])


def boxes_contain(boxes, points) -> np.ndarray:
    """Membership of each point in a finite union of boxes."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    hit = np.zeros(pts.shape[0], dtype=bool)
    for b in boxes:
        hit |= b.contains(pts)
    return hit


@dataclass(frozen=True)
class NoiseSpec:
    """Product of independent zero-mean univariate perturbations.

    ``scale`` holds the radius ``r`` (uniform) or the standard deviation
    ``sigma`` (Gaussian) for each state dimension.  Gaussian laws are
    truncated at ``kappa * sigma`` and renormalised.
    """

    kind: str
    scale: tuple
    kappa: float = 3.0

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        scale = tuple(float(s) for s in np.atleast_1d(self.scale))
        if not scale or any(not np.isfinite(s) or s <= 0 for s in scale):
            raise ValueError(f"noise scale must be finite and > 0, got {scale}")
        if self.kind == "gaussian" and not (np.isfinite(self.kappa) and self.kappa > 0):
            raise ValueError(f"truncation multiplier kappa must be > 0, got {self.kappa}")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "kappa", float(self.kappa))

    @classmethod
    def uniform(cls, r, dim: int = 1) -> "NoiseSpec":
        return cls("uniform", _broadcast(r, dim))

    @classmethod
    def gaussian(cls, sigma, dim: int = 1, kappa: float = 3.0) -> "NoiseSpec":
        return cls("gaussian", _broadcast(sigma, dim), kappa)

    @property
    def dim(self) -> int:
        return len(self.scale)

    @property
    def half_width(self) -> np.ndarray:
        s = np.asarray(self.scale)
        return s if self.kind == "uniform" else self.kappa * s

    def support(self) -> Box:
        hw = self.half_width
        return Box(-hw, hw)

    def with_dim(self, dim: int) -> "NoiseSpec":
        if dim == self.dim:
            return self
        if self.dim != 1:
            raise ValueError(f"cannot broadcast {self.dim}-D noise to {dim} dimensions")
        return NoiseSpec(self.kind, self.scale * dim, self.kappa)

    def cdf(self, x) -> np.ndarray:
        """Per-dimension CDF; ``x`` broadcasts against the last axis."""
        x = np.asarray(x, dtype=np.float64)
        s = np.asarray(self.scale)
        if self.kind == "uniform":
            return np.clip((x + s) / (2.0 * s), 0.0, 1.0)
        k = self.kappa
        z = np.clip(x / s, -k, k)
        lo = ndtr(-k)
        return (ndtr(z) - lo) / (ndtr(k) - lo)

    def cdf_axis(self, x, axis: int) -> np.ndarray:
        """CDF of coordinate ``axis`` alone."""
        x = np.asarray(x, dtype=np.float64)
        s = self.scale[axis]
        if self.kind == "uniform":
            return np.clip((x + s) / (2.0 * s), 0.0, 1.0)
        k = self.kappa
        lo = ndtr(-k)
        return (ndtr(np.clip(x / s, -k, k)) - lo) / (ndtr(k) - lo)

    def to_json(self) -> dict:
        vals = list(self.scale)
        v = vals[0] if all(x == vals[0] for x in vals) else vals
        if self.kind == "uniform":
            return {"kind": "uniform", "r": v}
        return {"kind": "gaussian", "sigma": v, "kappa": self.kappa}

    @classmethod
    def from_json(cls, obj: dict, dim: int = 1) -> "NoiseSpec":
        kind = obj.get("kind")
        if kind == "uniform":
            extra = set(obj) - {"kind", "r"}
            if extra:
                raise ValueError(f"unknown keys in uniform noise spec: {sorted(extra)}")
            return cls.uniform(obj["r"], dim)
        if kind == "gaussian":
            extra = set(obj) - {"kind", "sigma", "kappa"}
            if extra:
                raise ValueError(f"unknown keys in gaussian noise spec: {sorted(extra)}")
            return cls.gaussian(obj["sigma"], dim, obj.get("kappa", 3.0))
        raise ValueError(f"unknown noise kind {kind!r}")


def _broadcast(v, dim):
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if arr.shape[0] == 1:
        arr = np.repeat(arr, dim)
    if arr.shape[0] != dim:
        raise ValueError(f"expected {dim} noise scales, got {arr.shape[0]}")
    return tuple(arr.tolist())


def sample_noise(spec: NoiseSpec, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw perturbations; returns shape ``(dim,)`` or ``(*size, dim)``."""
    shape = (spec.dim,) if size is None else tuple(np.atleast_1d(size)) + (spec.dim,)
    s = np.asarray(spec.scale)
    if spec.kind == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape) * s
    # inverse-CDF sampling of the truncated normal keeps one uniform draw per coordinate
    k = spec.kappa
    lo, hi = ndtr(-k), ndtr(k)
    u = lo + (hi - lo) * rng.random(shape)
    z = np.clip(ndtri(u), -k, k)
    return z * s


def noise_box_mass(spec: NoiseSpec, lo, hi) -> np.ndarray:
    """``P(delta in [lo, hi])`` as the product of per-dimension masses.

    ``lo``/``hi`` have the noise dimension on their last axis; infinite bounds
    are allowed and empty boxes give 0.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    per_dim = np.clip(spec.cdf(hi) - spec.cdf(lo), 0.0, 1.0)
    per_dim = np.where(hi >= lo, per_dim, 0.0)
    return np.prod(per_dim, axis=-1)


@dataclass(frozen=True, eq=False)
class NoiseCells:
    """Equal-width grid partition of a noise support.

    Cells are half-open ``(lo, hi]`` except the first along each axis, which
    keeps its lower face, so every boundary point belongs to the
    lower-indexed cell.
    """

    lo: np.ndarray
    hi: np.ndarray
    mass: np.ndarray
    maxvol: float
    minvol: float
    maxmass: float
    minmass: float
    support: Box = field(repr=False)

    @property
    def count(self) -> int:
        return self.lo.shape[0]

    def cells(self) -> list:
        return [Box(a, b) for a, b in zip(self.lo, self.hi)]

    def locate(self, deltas) -> np.ndarray:
        """Flat cell index of each perturbation under the boundary convention."""
        d = np.atleast_2d(deltas)
        k = self._k
        flat = np.zeros(d.shape[0], dtype=np.int64)
        for j in range(d.shape[1]):
            edges = np.unique(np.concatenate([self.lo[:, j], self.hi[:, j]]))
            idx = np.clip(np.searchsorted(edges, d[:, j], side="left") - 1, 0, k - 1)
            flat = flat * k + idx
        return flat

    @property
    def _k(self) -> int:
        return int(round(self.count ** (1.0 / self.support.dim)))


def partition_noise_support(spec: NoiseSpec, k: int) -> NoiseCells:
    """Split the noise support into ``k`` equal slabs per dimension (``k**n`` cells)."""
    if int(k) != k or k < 1:
        raise ValueError(f"cells per dimension must be a positive integer, got {k}")
    k = int(k)
    sup = spec.support()
    edges = [np.linspace(sup.lo[j], sup.hi[j], k + 1) for j in range(spec.dim)]
    idx = np.array(list(product(range(k), repeat=spec.dim)), dtype=np.int64)
    lo = np.stack([edges[j][idx[:, j]] for j in range(spec.dim)], axis=1)
    hi = np.stack([edges[j][idx[:, j] + 1] for j in range(spec.dim)], axis=1)
    vol = np.prod(hi - lo, axis=1)
    mass = noise_box_mass(spec, lo, hi)
    return NoiseCells(lo=lo, hi=hi, mass=mass, maxvol=float(vol.max()), minvol=float(vol.min()),
                      maxmass=float(mass.max()), minmass=float(mass.min()), support=sup)


@dataclass
class Episode:
    """One perturbed rollout.  ``rewards[0]`` is always 0."""

    states: np.ndarray
    rewards: np.ndarray
    termination_step: int | None
    clamped: bool = False

    @property
    def cumulative_reward(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def truncated(self) -> bool:
        return self.termination_step is None
