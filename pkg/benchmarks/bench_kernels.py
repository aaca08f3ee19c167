"""Compiled vs numpy kernels on a LePage sum and a weighted partial sum.

    python benchmarks/bench_kernels.py [--points P] [--terms N] [--repeat R]

Prints the best-of-R wall time per backend and the largest relative
difference between the two results.
"""
import argparse
import time

import numpy as np

from anisofield import kernels


def best_of(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def lepage_case(P, N, rng):
    pts = rng.uniform(size=(P, 2))
    xi = rng.standard_cauchy(size=(N, 2)) * 10
    a = -0.5 * np.log(np.arange(1, N + 1))
    b = rng.normal(size=N) * 0.1
    g = rng.normal(size=N) + 1j * rng.normal(size=N)
    inv_alpha = 1 / np.linspace(1.2, 1.6, P)
    ck = [N // 4, N // 2, N]
    return lambda backend, threads: kernels.lepage_sum(pts, inv_alpha, xi, a, b, g, ck,
                                                       threads=threads, backend=backend)


def weighted_case(P, N, rng):
    w = rng.normal(size=(P, N)) / np.arange(1, N + 1)
    g = rng.normal(size=N) + 1j * rng.normal(size=N)
    ck = [N // 4, N // 2, N]
    return lambda backend, threads: kernels.weighted_partial_sums(w, g, ck, threads=threads,
                                                                  backend=backend)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=1024)
    ap.add_argument("--terms", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    cases = {"lepage_sum": lepage_case(args.points, args.terms, rng),
             "weighted_partial_sums": weighted_case(args.points, args.terms, rng)}
    print(f"points={args.points} terms={args.terms} threads={args.threads}")
    for name, case in cases.items():
        res = {}
        for b in backends:
            dt, out = best_of(lambda: case(b, args.threads), args.repeat)
            res[b] = out
            print(f"{name:24s} {b:7s} {dt * 1e3:9.1f} ms")
        if len(res) == 2:
            p, c = res["python"], res["cython"]
            rel = np.max(np.abs(p - c)) / max(np.max(np.abs(c)), 1e-300)
            print(f"{name:24s} max rel diff {rel:.2e}")
    if len(backends) == 1:
        print("compiled kernels not built; only the numpy path was timed")


if __name__ == "__main__":
    main()
