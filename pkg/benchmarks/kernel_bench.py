#!/usr/bin/env python3
"""Benchmark the jitted kernels against their pure-numpy fallbacks.

The library binds one implementation at import time (FRESHANN_PURE_NUMPY=1
selects the fallback); this script imports both variants directly and times
them on the same inputs.

Usage:
    python benchmarks/kernel_bench.py [--dim 64] [--n 20000] [--repeat 5]
"""

import argparse
import time

import numpy as np

from freshann import kernels


def timeit(fn, *args, repeat=5, inner=1):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def bench_pair(name, nb_fn, np_fn, args_fn, repeat, inner=1):
    args = args_fn()
    np_time = timeit(np_fn, *args, repeat=repeat, inner=inner)
    if nb_fn is None:
        print(f"{name:<22} numpy {np_time*1e6:>10.1f} us   (numba unavailable)")
        return
    nb_fn(*args_fn())  # compile outside the timed region
    nb_time = timeit(nb_fn, *args_fn(), repeat=repeat, inner=inner)
    print(f"{name:<22} numba {nb_time*1e6:>10.1f} us   numpy {np_time*1e6:>10.1f} us"
          f"   speedup {np_time/nb_time:>6.1f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    dim, n = args.dim, args.n
    vecs = rng.normal(size=(n, dim)).astype(np.float32)
    q = rng.normal(size=dim).astype(np.float32)

    nb = kernels if kernels.NUMBA_ENABLED else None

    bench_pair(
        "l2_sq_batch(2048)",
        nb and nb._nb_l2_sq_batch, kernels._np_l2_sq_batch,
        lambda: (vecs[:2048], q), args.repeat, inner=20)

    # bounded-degree graph for the traversal kernel
    R, L = 32, 50
    adj = rng.integers(0, n, size=(n, R)).astype(np.int32)
    deg = np.full(n, R, dtype=np.int32)

    def greedy_args():
        return (vecs, adj, deg, q, 0, L,
                np.empty(L, np.int32), np.empty(L, np.float64),
                np.empty(n + 1, np.int32), np.empty(n + 1, np.float64),
                np.zeros(n, np.int64), np.zeros(n, np.int64), 1)

    bench_pair("greedy_search", nb and nb._nb_greedy_search,
               kernels._np_greedy_search, greedy_args, args.repeat)

    m = 130  # typical consolidation candidate-list size
    cand = rng.normal(size=(m, dim)).astype(np.float32)
    dists = kernels._np_l2_sq_batch(cand, q)

    def prune_args():
        return (cand, dists.copy(), 1.44, 32, np.empty(m, np.int64))

    bench_pair("robust_prune(130)", nb and nb._nb_robust_prune,
               kernels._np_robust_prune, prune_args, args.repeat, inner=5)

    lut = rng.normal(size=(16, 256)).astype(np.float64) ** 2
    codes = rng.integers(0, 256, size=(4096, 16)).astype(np.uint8)

    def adc_args():
        return (lut, codes, np.empty(4096, np.float64))

    bench_pair("adc_batch(4096x16)", nb and nb._nb_adc_batch,
               kernels._np_adc_batch, adc_args, args.repeat, inner=20)

    table = rng.normal(size=(256, 8)).astype(np.float32)

    def chunk_args():
        return (table, q[:8], np.empty(256, np.float64))

    bench_pair("chunk_sq_dists", nb and nb._nb_chunk_sq_dists,
               kernels._np_chunk_sq_dists, chunk_args, args.repeat, inner=50)


if __name__ == "__main__":
    main()
