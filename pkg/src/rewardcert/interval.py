"""Vectorised interval arithmetic and an interval forward-mode dual number.

Dynamics are written once against an ``ops`` namespace (``sin``, ``cos``,
``clip``, ``sqr``, ``cube``) and evaluated on floats (:data:`FLOAT_OPS`),
intervals (:data:`INTERVAL_OPS`) or interval duals (:data:`DUAL_OPS`, used to
enclose Jacobians when bounding Lipschitz constants).
"""
from __future__ import annotations

from types import SimpleNamespace

import numpy as np

_TWO_PI = 2.0 * np.pi


class Interval:
    __slots__ = ("lo", "hi")
    __array_priority__ = 1000

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=np.float64)
        hi = lo if hi is None else np.asarray(hi, dtype=np.float64)
        self.lo, self.hi = np.broadcast_arrays(lo, hi)

    @staticmethod
    def lift(x) -> "Interval":
        return x if isinstance(x, Interval) else Interval(x, x)

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def mag(self):
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def hull(self, other) -> "Interval":
        o = Interval.lift(other)
        return Interval(np.minimum(self.lo, o.lo), np.maximum(self.hi, o.hi))

    def __neg__(self):
        return Interval(-self.hi, -self.lo)

    def __add__(self, other):
        o = Interval.lift(other)
        return Interval(self.lo + o.lo, self.hi + o.hi)

    __radd__ = __add__

    def __sub__(self, other):
        o = Interval.lift(other)
        return Interval(self.lo - o.hi, self.hi - o.lo)

    def __rsub__(self, other):
        return Interval.lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, Interval):
            c = np.asarray(other, dtype=np.float64)
            a, b = self.lo * c, self.hi * c
            return Interval(np.minimum(a, b), np.maximum(a, b))
        p = np.stack(np.broadcast_arrays(self.lo * other.lo, self.lo * other.hi,
                                         self.hi * other.lo, self.hi * other.hi))
        return Interval(p.min(axis=0), p.max(axis=0))

    __rmul__ = __mul__

    def reciprocal(self):
        if np.any((self.lo <= 0) & (self.hi >= 0)):
            raise ZeroDivisionError("interval division by an interval containing 0")
        return Interval(1.0 / self.hi, 1.0 / self.lo)

    def __truediv__(self, other):
        if not isinstance(other, Interval):
            return self * (1.0 / np.asarray(other, dtype=np.float64))
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return Interval.lift(other) * self.reciprocal()

    def __repr__(self):
        return f"Interval(lo={self.lo!r}, hi={self.hi!r})"


def iv_sin(x: Interval) -> Interval:
    lo, hi = x.lo, x.hi
    s_lo, s_hi = np.sin(lo), np.sin(hi)
    out_lo = np.minimum(s_lo, s_hi)
    out_hi = np.maximum(s_lo, s_hi)
    # a maximum at pi/2 + 2k pi inside [lo, hi]?
    k_max = np.ceil((lo - np.pi / 2) / _TWO_PI)
    has_max = np.pi / 2 + k_max * _TWO_PI <= hi
    k_min = np.ceil((lo + np.pi / 2) / _TWO_PI)
    has_min = -np.pi / 2 + k_min * _TWO_PI <= hi
    out_hi = np.where(has_max, 1.0, out_hi)
    out_lo = np.where(has_min, -1.0, out_lo)
    return Interval(out_lo, out_hi)


def iv_cos(x: Interval) -> Interval:
    return iv_sin(x + np.pi / 2)


def iv_sqr(x: Interval) -> Interval:
    a, b = x.lo * x.lo, x.hi * x.hi
    straddle = (x.lo <= 0) & (x.hi >= 0)
    return Interval(np.where(straddle, 0.0, np.minimum(a, b)), np.maximum(a, b))


def iv_cube(x: Interval) -> Interval:
    return Interval(x.lo ** 3, x.hi ** 3)


def iv_clip(x: Interval, lo, hi) -> Interval:
    return Interval(np.clip(x.lo, lo, hi), np.clip(x.hi, lo, hi))


class IDual:
    """Interval value with interval partial derivatives."""

    __slots__ = ("val", "grad")
    __array_priority__ = 1001

    def __init__(self, val: Interval, grad: list):
        self.val = val
        self.grad = grad

    @staticmethod
    def variables(boxes_lo, boxes_hi):
        """One dual per coordinate of a box, seeded with unit derivatives."""
        n = len(boxes_lo)
        out = []
        for i in range(n):
            g = [Interval(1.0 if j == i else 0.0) for j in range(n)]
            out.append(IDual(Interval(boxes_lo[i], boxes_hi[i]), g))
        return out

    def _const(self, c):
        return IDual(Interval.lift(c), [Interval(0.0)] * len(self.grad))

    def _lift(self, o):
        return o if isinstance(o, IDual) else self._const(o)

    def __neg__(self):
        return IDual(-self.val, [-g for g in self.grad])

    def __add__(self, o):
        o = self._lift(o)
        return IDual(self.val + o.val, [a + b for a, b in zip(self.grad, o.grad)])

    __radd__ = __add__

    def __sub__(self, o):
        o = self._lift(o)
        return IDual(self.val - o.val, [a - b for a, b in zip(self.grad, o.grad)])

    def __rsub__(self, o):
        return self._lift(o) - self

    def __mul__(self, o):
        if not isinstance(o, IDual):
            return IDual(self.val * o, [g * o for g in self.grad])
        return IDual(self.val * o.val, [a * o.val + self.val * b for a, b in zip(self.grad, o.grad)])

    __rmul__ = __mul__

    def __truediv__(self, o):
        if not isinstance(o, IDual):
            return self * (1.0 / np.asarray(o, dtype=np.float64))
        inv = o.val.reciprocal()
        inv2 = iv_sqr(o.val).reciprocal()
        return IDual(self.val * inv,
                     [a * inv - (self.val * b) * inv2 for a, b in zip(self.grad, o.grad)])

    def __rtruediv__(self, o):
        return self._lift(o) / self


def _d_sin(x: IDual):
    c = iv_cos(x.val)
    return IDual(iv_sin(x.val), [g * c for g in x.grad])


def _d_cos(x: IDual):
    s = -iv_sin(x.val)
    return IDual(iv_cos(x.val), [g * s for g in x.grad])


def _d_sqr(x: IDual):
    return IDual(iv_sqr(x.val), [g * (2.0 * x.val) for g in x.grad])


def _d_cube(x: IDual):
    d = 3.0 * iv_sqr(x.val)
    return IDual(iv_cube(x.val), [g * d for g in x.grad])


def _d_clip(x: IDual, lo, hi):
    v = x.val
    fully_in = (v.lo >= lo) & (v.hi <= hi)
    fully_out = (v.hi < lo) | (v.lo > hi)
    d = Interval(np.where(fully_in, 1.0, 0.0), np.where(fully_out, 0.0, 1.0))
    return IDual(iv_clip(v, lo, hi), [g * d for g in x.grad])


FLOAT_OPS = SimpleNamespace(sin=np.sin, cos=np.cos, clip=np.clip, sqr=np.square,
                            cube=lambda x: x * x * x)
INTERVAL_OPS = SimpleNamespace(sin=iv_sin, cos=iv_cos, clip=iv_clip, sqr=iv_sqr, cube=iv_cube)
DUAL_OPS = SimpleNamespace(sin=_d_sin, cos=_d_cos, clip=_d_clip, sqr=_d_sqr, cube=_d_cube)
