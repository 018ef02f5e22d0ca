"""Times one training epoch and one prediction pass on each kernel backend.

Usage: python3 benchmarks/bench_kernels.py [--users 943] [--items 1682] [--ratings 100000]
"""
import argparse
import time

import numpy as np

from mnartri import kernels


def bench(backend, m, n, d, users, items, targets, batch_size, repeats):
    k = kernels.get(backend)
    rng = np.random.default_rng(0)
    size = (m + n) * d + m + n + 1
    params = rng.normal(0, 0.1, size)
    m1, m2, grad = np.zeros(size), np.zeros(size), np.zeros(size)
    weights = np.ones(len(targets))
    order = rng.permutation(len(targets)).astype(np.int64)
    times = {}
    start = time.perf_counter()
    step = 0
    for _ in range(repeats):
        step = k.adam_epoch(params, m1, m2, grad, m, n, d, users, items, targets, weights, order,
                            batch_size, 0.01, 0.9, 0.999, 1e-8, 1e-4, kernels.SQUARED, step)
    times["epoch"] = (time.perf_counter() - start) / repeats
    start = time.perf_counter()
    for _ in range(repeats):
        k.predict_pairs(params, m, n, d, users, items)
    times["predict"] = (time.perf_counter() - start) / repeats
    return times


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--users", type=int, default=943)
    parser.add_argument("--items", type=int, default=1682)
    parser.add_argument("--ratings", type=int, default=100_000)
    parser.add_argument("--dim", type=int, default=10)
    parser.add_argument("--batch-size", type=int, default=1024)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    rng = np.random.default_rng(1)
    users = rng.integers(0, args.users, args.ratings).astype(np.int64)
    items = rng.integers(0, args.items, args.ratings).astype(np.int64)
    targets = rng.integers(1, 6, args.ratings).astype(np.float64)
    print(f"{args.ratings} ratings, {args.users}x{args.items}, dim {args.dim}, batch {args.batch_size}")
    results = {}
    for backend in kernels.BACKENDS:
        results[backend] = bench(backend, args.users, args.items, args.dim, users, items, targets,
                                 args.batch_size, args.repeats)
        print(f"{backend:>9}: epoch {results[backend]['epoch'] * 1e3:9.2f} ms   "
              f"predict {results[backend]['predict'] * 1e3:8.2f} ms")
    if {"compiled", "python"} <= set(results):
        for key in ("epoch", "predict"):
            print(f"speedup ({key}): {results['python'][key] / results['compiled'][key]:.1f}x")


if __name__ == "__main__":
    main()
