"""Hot kernels with a numba path and a pure-numpy fallback.

Set ``REWARDCERT_NUMBA=0`` before import to force the numpy path (useful when
debugging or when numba is unavailable).  Both paths return identical results.
"""
import os

import numpy as np

_WANT_NUMBA = os.environ.get("REWARDCERT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by REWARDCERT_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------- numba

@njit(cache=True)
def _min_l1_distance_nb(queries, points):
    nq = queries.shape[0]
    npnt = points.shape[0]
    dim = queries.shape[1]
    out = np.empty(nq)
    for i in range(nq):
        best = np.inf
        for j in range(npnt):
            d = 0.0
            for k in range(dim):
                d += abs(queries[i, k] - points[j, k])
                if d >= best:
                    break
            if d < best:
                best = d
        out[i] = best
    return out


@njit(cache=True)
def _first_box_nb(points, lo, hi):
    n = points.shape[0]
    nb = lo.shape[0]
    dim = points.shape[1]
    out = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for b in range(nb):
            inside = True
            for k in range(dim):
                x = points[i, k]
                if x < lo[b, k] or x > hi[b, k]:
                    inside = False
                    break
            if inside:
                out[i] = b
                break
    return out


# ---------------------------------------------------------------- numpy

def _min_l1_distance_np(queries, points, chunk=2048):
    out = np.empty(queries.shape[0])
    for start in range(0, queries.shape[0], chunk):
        q = queries[start:start + chunk]
        d = np.abs(q[:, None, :] - points[None, :, :]).sum(axis=2)
        out[start:start + chunk] = d.min(axis=1)
    return out


def _first_box_np(points, lo, hi, chunk=4096):
    out = np.full(points.shape[0], -1, dtype=np.int64)
    for start in range(0, points.shape[0], chunk):
        p = points[start:start + chunk]
        inside = np.all((p[:, None, :] >= lo[None]) & (p[:, None, :] <= hi[None]), axis=2)
        hit = inside.any(axis=1)
        idx = inside.argmax(axis=1)
        out[start:start + chunk] = np.where(hit, idx, -1)
    return out


def _tail_counts_np(values, thresholds):
    sv = np.sort(values)
    return sv.shape[0] - np.searchsorted(sv, thresholds, side="left")


# ---------------------------------------------------------------- public

def min_l1_distance(queries, points, use_numba=None):
    """L1 distance from every query to its nearest point (brute force)."""
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if _pick(use_numba):
        return _min_l1_distance_nb(queries, points)
    return _min_l1_distance_np(queries, points)


def first_containing_box(points, lo, hi, use_numba=None):
    """Index of the first closed box containing each point, ``-1`` if none.

    Ties on shared faces resolve to the lower index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    if _pick(use_numba):
        return _first_box_nb(points, lo, hi)
    return _first_box_np(points, lo, hi)


def tail_counts(values, thresholds):
    """Number of ``values`` that are ``>= t`` for each threshold ``t``.

    numpy only: its sort beats a compiled loop here (see benchmarks/).
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    return _tail_counts_np(values, thresholds)


def _pick(use_numba):
    if use_numba is None:
        return HAVE_NUMBA
    return bool(use_numba) and HAVE_NUMBA
