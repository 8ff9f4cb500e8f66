"""Integral histogram build time: numba kernels vs the pure-numpy fallback.

    python3 benchmarks/bench_integral.py --size 512 --bins 32 --threads 1 2 4 8

Every schedule is timed on both backends into a reused output buffer; the
best of ``--repeat`` runs is reported. Outputs are checked for equality
against the sequential numba build.
"""

import argparse
import time

import numpy as np

from spct import integral
from spct.fixtures import random_bins
from spct.imagecore import BinMap
from spct.integral import ALL_KINDS, ScanSchedule


def best_time(bm, sched, use_numba, repeat):
    buf = integral.new_buffer(bm)
    t = integral.build(bm, sched, use_numba=use_numba, out=buf)  # compile / first touch
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        t = integral.build(bm, sched, use_numba=use_numba, out=buf)
        best = min(best, time.perf_counter() - t0)
    return best, t.data.copy()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--bins", type=int, default=32)
    ap.add_argument("--tile", type=int, default=integral.DEFAULT_TILE)
    ap.add_argument("--threads", type=int, nargs="+", default=[1])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    bm = BinMap(random_bins(args.size, args.size, args.bins, args.seed), args.bins)
    ref = None
    print(f"{'schedule':8} {'threads':>7} {'numba s':>10} {'numpy s':>10} {'speedup':>8}")
    for kind in ALL_KINDS:
        for th in args.threads:
            if kind is integral.ScheduleKind.SEQUENTIAL and th > args.threads[0]:
                continue
            sched = ScanSchedule(kind, args.tile, th)
            t_nb, d_nb = best_time(bm, sched, True, args.repeat)
            t_np, d_np = best_time(bm, sched, False, args.repeat)
            if ref is None:
                ref = d_nb
            ok = np.array_equal(ref, d_nb) and np.array_equal(ref, d_np)
            print(f"{kind.value:8} {th:7d} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.2f}" + ("" if ok else "  MISMATCH"))


if __name__ == "__main__":
    main()
