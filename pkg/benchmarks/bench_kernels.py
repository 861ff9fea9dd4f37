"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The first numba call (compilation) is excluded; results are checked equal.
"""
import argparse
import time

import numpy as np

from rewardcert import _accel


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    pts = rng.uniform(0, 1, (20_000, 2))
    q = rng.uniform(0, 1, (2_000, 2))
    lo = rng.uniform(0, 0.9, (400, 2))
    hi = lo + 0.1
    return {
        "min_l1_distance": (lambda nb: _accel.min_l1_distance(q, pts, nb)),
        "first_containing_box": (lambda nb: _accel.first_containing_box(pts, lo, hi, nb)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba unavailable (or REWARDCERT_NUMBA=0); only the numpy path runs")
    print(f"{'kernel':24s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_np, ref = best_of(lambda: fn(False), args.repeat)
        if _accel.HAVE_NUMBA:
            fn(True)  # compile
            t_nb, out = best_of(lambda: fn(True), args.repeat)
            assert np.array_equal(out, ref), name
            print(f"{name:24s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}")
        else:
            print(f"{name:24s} {t_np:10.4f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
