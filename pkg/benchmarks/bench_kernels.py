"""Compiled versus pure-Python scheduling kernels on the reference scenario.

    python benchmarks/bench_kernels.py [--rows 64] [--repeat 5]

Prints per-kernel best-of-N wall times and the speedup, and checks that both
backends return identical arrays.
"""
import argparse
import sys
import timeit

import numpy as np

from vertievo import kernels
from vertievo.ga import penalty_matrix, variant_weights
from vertievo.metrics import LONG_WAIT_THRESHOLD
from vertievo.scenario import reference_scenario


def workload(rows, seed):
    sc = reference_scenario()
    a = sc.arrays()
    rng = np.random.default_rng(seed)
    orders = np.ascontiguousarray(np.argsort(a.release + rng.uniform(0, 120, (rows, sc.n)), axis=1, kind="stable"), dtype=np.int64)
    pen = np.ascontiguousarray(penalty_matrix(sc, variant_weights("v3")), dtype=np.float64)
    k_tail = int(np.ceil(0.05 * sc.n))
    return sc, a, orders, pen, k_tail


def calls(mod, a, orders, pen, k_tail):
    starts, _ = mod.decode_batch(orders, a.release, a.demand, a.class_index, a.pad_offset, a.separations, a.bin_width)
    waits = np.ascontiguousarray(starts - a.release)
    return {
        "decode_batch": lambda: mod.decode_batch(orders, a.release, a.demand, a.class_index, a.pad_offset, a.separations, a.bin_width),
        "wait_moments": lambda: mod.wait_moments(waits, k_tail, LONG_WAIT_THRESHOLD),
        "penalty_sums": lambda: mod.penalty_sums(starts, waits, a.class_index, pen, a.bin_width),
        "order_crossover": lambda: [mod.order_crossover(orders[i], orders[i + 1], 100, 300) for i in range(len(orders) - 1)],
    }


def same(x, y):
    if isinstance(x, tuple):
        return all(same(p, q) for p, q in zip(x, y))
    if isinstance(x, list):
        return all(np.array_equal(p, q) for p, q in zip(x, y))
    return np.array_equal(x, y)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    compiled = kernels.compiled()
    if compiled is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    sc, a, orders, pen, k_tail = workload(args.rows, args.seed)
    py = calls(kernels.python, a, orders, pen, k_tail)
    cy = calls(compiled, a, orders, pen, k_tail)
    print(f"n={sc.n} requests, {args.rows} chromosomes, best of {args.repeat}")
    print(f"{'kernel':<16}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  match")
    for name in py:
        t_py = min(timeit.repeat(py[name], number=1, repeat=args.repeat)) * 1e3
        t_cy = min(timeit.repeat(cy[name], number=1, repeat=args.repeat)) * 1e3
        ok = same(py[name](), cy[name]())
        print(f"{name:<16}{t_py:12.2f}{t_cy:12.3f}{t_py / t_cy:10.1f}  {'yes' if ok else 'NO'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
