#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Times the three hot kernels (selective scan, depthwise causal conv, WHT
butterfly) on desk-scale shapes and cross-checks that both backends agree.

Usage: python benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from ssmq import _py_kernels

try:
    from ssmq import _core
except ImportError:
    _core = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scan(impl, dtype):
    rng = np.random.default_rng(0)
    T, d, n = 512, 256, 16
    x = rng.standard_normal((T, d)).astype(dtype)
    delta = np.exp(rng.uniform(-4, -1, (T, d))).astype(dtype)
    a = (-np.exp(rng.uniform(-1, 1, (d, n)))).astype(dtype)
    b = rng.standard_normal((T, n)).astype(dtype)
    c = rng.standard_normal((T, n)).astype(dtype)
    dv = rng.standard_normal(d).astype(dtype)
    h = np.zeros((d, n), dtype)
    y = np.empty((T, d), dtype)

    def run():
        h[:] = 0
        impl.selective_scan(x, delta, a, b, c, dv, h, y)

    return run, y


def bench_conv(impl, dtype):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2048, 256)).astype(dtype)
    w = rng.standard_normal((4, 256)).astype(dtype)
    bias = rng.standard_normal(256).astype(dtype)
    out = np.empty_like(x)

    def run():
        impl.causal_conv(x, w, bias, out)

    return run, out


def bench_fwht(impl, dtype):
    rng = np.random.default_rng(2)
    base = rng.standard_normal((256, 1024)).astype(dtype)
    buf = np.empty_like(base)

    def run():
        buf[:] = base
        impl.fwht_inplace(buf)

    return run, buf


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _core is None:
        print("compiled core not built; timing the fallback only")

    benches = [("scan T=512 d=256 n=16", bench_scan),
               ("conv T=2048 c=256 k=4", bench_conv),
               ("fwht 256x1024", bench_fwht)]
    print(f"{'kernel':<24}{'dtype':<10}{'fallback':>12}{'compiled':>12}{'speedup':>10}  agreement")
    for name, make in benches:
        for dtype in (np.float32, np.float64):
            run_py, out_py = make(_py_kernels, dtype)
            t_py = timeit(run_py, args.repeats)
            if _core is not None:
                run_c, out_c = make(_core, dtype)
                t_c = timeit(run_c, args.repeats)
                run_py()
                run_c()
                diff = float(np.max(np.abs(out_py.astype(np.float64) - out_c.astype(np.float64))))
                scale = float(np.max(np.abs(out_py))) or 1.0
                agree = f"max rel diff {diff / scale:.2e}"
                print(f"{name:<24}{np.dtype(dtype).name:<10}{t_py * 1e3:>10.2f}ms"
                      f"{t_c * 1e3:>10.2f}ms{t_py / t_c:>9.1f}x  {agree}")
            else:
                print(f"{name:<24}{np.dtype(dtype).name:<10}{t_py * 1e3:>10.2f}ms{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
