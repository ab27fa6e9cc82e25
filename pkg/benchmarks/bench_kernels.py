"""Benchmark the numba kernels against the pure-numpy fallback.

Times the hot per-slot estimator kernels on realistic shapes (a training
step touches batch x slots rows; the conditional-average kernels add a K-way
inner loop). Run:

    python benchmarks/bench_kernels.py --slots 400 --k 100 --classes 8
"""

import argparse
import time

import numpy as np

from stgrad import kernels
from stgrad.rng import stream, uniform_open


def time_fn(fn, *args, repeat=5, warmup=1):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--slots", type=int, default=400, help="rows per call (batch x latents)")
    parser.add_argument("--k", type=int, default=100, help="conditional samples per slot")
    parser.add_argument("--classes", type=int, default=8)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba is not installed; only the numpy path is available")

    S, n, K = args.slots, args.classes, args.k
    r = stream(0, 0)
    g = r.standard_normal((S, n))
    logits = r.standard_normal((S, n))
    d_idx = r.integers(0, n, size=S)
    pi = kernels.softmax_rows(logits, 1.0)
    gum = r.standard_normal((S, n))
    u = uniform_open(r, (S, K, n))

    cases = [
        ("st_rows", (g, pi)),
        ("reinmax_rows", (g, d_idx, pi, pi)),
        ("rk2_rows", (g, d_idx, pi, 0.3)),
        ("stgs_rows", (g, gum, logits, 0.5)),
        ("conditional_gumbel_rows", (logits, d_idx, u)),
        ("gumbel_rao_rows", (g, d_idx, logits, 1.0, u)),
    ]
    print(f"slots={S} classes={n} K={K} (best of {args.repeat})")
    print(f"{'kernel':26s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name, call_args in cases:
        impls = kernels.IMPLEMENTATIONS[name]
        t_np = time_fn(impls["numpy"], *call_args, repeat=args.repeat)
        if impls["numba"] is None:
            print(f"{name:26s} {t_np * 1e3:10.3f} ms {'-':>12s} {'-':>9s}")
            continue
        t_nb = time_fn(impls["numba"], *call_args, repeat=args.repeat)
        np.testing.assert_allclose(
            impls["numpy"](*call_args), impls["numba"](*call_args), rtol=1e-10, atol=1e-12
        )
        print(
            f"{name:26s} {t_np * 1e3:10.3f} ms {t_nb * 1e3:10.3f} ms {t_np / t_nb:8.1f}x"
        )


if __name__ == "__main__":
    main()
