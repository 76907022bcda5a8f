#!/usr/bin/env python3
"""Benchmark the numba-jitted kernels against the pure-numpy fallbacks.

Runs the depthwise 3x3 convolution (forward + weight gradient) and the GELU
activation on shapes representative of the encoder levels, then prints a
speedup table. The two backends are also cross-checked for agreement here.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--dtype float32|float64]
"""

import argparse
import time

import numpy as np

from deblur.kernels import _numpy as knp

try:
    from deblur.kernels import _numba as knb
except ImportError:
    knb = None

# (batch, channels, height, width) per encoder level, toy-config training scale
SHAPES = [
    (4, 48, 64, 64),
    (4, 96, 32, 32),
    (4, 192, 16, 16),
    (4, 384, 8, 8),
]


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_case(name, np_fn, nb_fn, repeats, check_tol):
    a = np_fn()
    rows = []
    if nb_fn is None:
        t_np = timeit(np_fn, repeats)
        rows.append((name, t_np, None, None))
        return rows
    b = nb_fn()
    err = np.abs(np.asarray(a) - np.asarray(b)).max()
    assert err < check_tol, f"{name}: backends disagree by {err}"
    t_np = timeit(np_fn, repeats)
    t_nb = timeit(nb_fn, repeats)
    rows.append((name, t_np, t_nb, t_np / t_nb))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = parser.parse_args()
    dtype = np.dtype(args.dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-10

    if knb is None:
        print("numba not available: timing the numpy path only\n")
    else:
        # trigger JIT compilation outside the timed region
        warm = np.ones((1, 2, 8, 8), dtype=dtype)
        knb.dwconv2d(warm, np.ones((2, 3, 3), dtype=dtype))
        knb.dwconv2d_weight_grad(warm, warm)
        knb.gelu_fwd(warm)
        knb.gelu_bwd(warm)

    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        n, c, h, w = shape
        x = rng.standard_normal(shape).astype(dtype)
        g = rng.standard_normal(shape).astype(dtype)
        k = rng.standard_normal((c, 3, 3)).astype(dtype)
        tag = f"{n}x{c}x{h}x{w}"
        rows += bench_case(
            f"dwconv2d      {tag}",
            lambda: knp.dwconv2d(x, k),
            (lambda: knb.dwconv2d(x, k)) if knb else None,
            args.repeats, tol * c,
        )
        rows += bench_case(
            f"dwconv2d_wgrad {tag}",
            lambda: knp.dwconv2d_weight_grad(g, x),
            (lambda: knb.dwconv2d_weight_grad(g, x)) if knb else None,
            args.repeats, tol * n * h * w,
        )
        rows += bench_case(
            f"gelu_fwd      {tag}",
            lambda: knp.gelu_fwd(x),
            (lambda: knb.gelu_fwd(x)) if knb else None,
            args.repeats, tol,
        )

    print(f"{'kernel / shape':<34}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>9}")
    for name, t_np, t_nb, speed in rows:
        if t_nb is None:
            print(f"{name:<34}{t_np * 1e3:>12.3f}{'-':>12}{'-':>9}")
        else:
            print(f"{name:<34}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{speed:>8.1f}x")


if __name__ == "__main__":
    main()
