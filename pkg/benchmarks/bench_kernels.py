"""Compare the compiled and numpy subset-selection kernels.

    python benchmarks/bench_kernels.py --pools 5000 --width 30 --n 20 --reps 20

Prints one line per (strategy, backend) with the best wall time over
``--reps`` calls and checks that both backends return identical arrays.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from bonlaw import kernels
from bonlaw.selection import Strategy, _cell_keys
from bonlaw.rng import cell_generator


def make_inputs(pools: int, width: int, seed: int):
    rng = cell_generator(seed)
    true = rng.uniform(0, 1, (pools, width))
    mean = true + 0.1 * rng.standard_normal((pools, width))
    var = rng.uniform(0.001, 0.05, (pools, width))
    sizes = np.full(pools, width, dtype=np.int64)
    return true, mean, var, sizes


def best_time(fn, reps: int) -> float:
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pools", type=int, default=5000)
    ap.add_argument("--width", type=int, default=30)
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--strategies", default="oracle,random,mean,lcb:0.5,varfilter:0.2,snr")
    args = ap.parse_args(argv)

    if not kernels.compiled_available():
        print("compiled kernels not built; timing the numpy fallback only", file=sys.stderr)
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    true, mean, var, sizes = make_inputs(args.pools, args.width, args.seed)
    keys = _cell_keys(args.seed, args.pools, 0, args.n)

    print(f"pools={args.pools} width={args.width} n={args.n} reps={args.reps}")
    print(f"{'strategy':<14}{'backend':<9}{'best_s':>10}{'speedup':>9}")
    for text in args.strategies.split(","):
        s = Strategy.parse(text)
        results, times = {}, {}
        for b in backends:
            call = lambda: kernels.subsample_select(
                true, mean, var, sizes, keys, args.n, s.code, s.param, s.keep_count(args.n), backend=b
            )
            results[b] = call()
            times[b] = best_time(call, args.reps)
        if len(results) == 2 and not np.array_equal(results["python"], results["cython"]):
            print(f"{text}: backends disagree", file=sys.stderr)
            return 1
        for b in backends:
            print(f"{str(s):<14}{b:<9}{times[b]:>10.4f}{times['python'] / times[b]:>8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
