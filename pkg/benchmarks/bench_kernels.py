"""Timing comparison of the numba kernels against their numpy twins at
the shapes the training loop actually uses.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from karl import kernels


def bench(fn, *args, repeats=20):
    fn(*args)  # warmup (and jit compile)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def row(name, np_fn, jit_fn, *args, **kw):
    t_np = bench(np_fn, *args, **kw)
    if jit_fn is None:
        print(f"{name:<22} numpy {t_np * 1e3:8.3f} ms   numba    (unavailable)")
        return
    t_jit = bench(jit_fn, *args, **kw)
    print(f"{name:<22} numpy {t_np * 1e3:8.3f} ms   numba {t_jit * 1e3:8.3f} ms"
          f"   speedup {t_np / t_jit:5.2f}x")


def main():
    rng = np.random.default_rng(0)
    print(f"numba available: {kernels.HAS_NUMBA}   selected: "
          f"{'numba' if kernels.USE_NUMBA else 'numpy'}")

    has = kernels.HAS_NUMBA

    # vector quantizer lookups: a training batch of 16 images x 64 tokens
    z = rng.standard_normal((16 * 64, 12))
    codes = rng.standard_normal((512, 12))
    row("nearest_codes", kernels.nearest_codes_numpy,
        kernels.nearest_codes_numba if has else None, z, codes)

    # attention rows: batch 16, 4 heads, 128 queries over 128 keys
    logits = rng.standard_normal((16 * 4, 128, 128))
    row("softmax_rows", kernels.softmax_rows_numpy,
        kernels.softmax_rows_numba if has else None, logits)

    # ssim stats: 7x7 windows over one 32x32 channel
    a = rng.random((32, 32))
    b = rng.random((32, 32))
    row("ssim_window_stats", kernels.ssim_window_stats_numpy,
        kernels.ssim_window_stats_numba if has else None, a, b, 7)

    # synthetic data generation
    row("mandelbrot_escape", kernels.mandelbrot_escape_numpy,
        kernels.mandelbrot_escape_numba if has else None,
        -2.0, 0.7, -1.2, 1.2, 128, 128, 64)


if __name__ == "__main__":
    main()
