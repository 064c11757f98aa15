#!/usr/bin/env python3
"""Benchmark the jitted kernels against the pure-numpy fallback.

Times each hot kernel on desk-scale shapes (what the training loops actually
run) and prints a side-by-side table with agreement checks. The jitted path
is warmed before timing so compilation cost is excluded; run with
MODASEG_BACKEND to confirm which path a deployment resolves to.

    python3 benchmarks/bench_kernels.py [--repeats 30]
"""

import argparse
import time

import numpy as np

from modaseg import _kernels_numpy
from modaseg.backend import active_backend

try:
    from modaseg import _kernels_numba
except ImportError:
    _kernels_numba = None


def timeit(fn, repeats):
    fn()  # warm (and JIT-compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


CASES = []


def case(name):
    def wrap(builder):
        CASES.append((name, builder))
        return builder
    return wrap


RNG = np.random.default_rng(0)


@case("conv2d fwd 4x16x64x64 k3")
def _conv_fwd():
    x = RNG.normal(size=(4, 16, 66, 66))
    w = RNG.normal(size=(16, 16, 3, 3))
    return lambda impl: impl.conv2d_forward(x, w, 1)


@case("conv2d fwd 4x64x18x18 k3 (trunk)")
def _conv_fwd_trunk():
    x = RNG.normal(size=(4, 64, 18, 18))
    w = RNG.normal(size=(64, 64, 3, 3))
    return lambda impl: impl.conv2d_forward(x, w, 1)


@case("conv2d grad_input 4x16x64x64 k3")
def _conv_gi():
    g = RNG.normal(size=(4, 16, 64, 64))
    w = RNG.normal(size=(16, 16, 3, 3))
    return lambda impl: impl.conv2d_grad_input(g, w, 1, 66, 66)


@case("conv2d grad_weight 4x16x64x64 k3")
def _conv_gw():
    x = RNG.normal(size=(4, 16, 66, 66))
    g = RNG.normal(size=(4, 16, 64, 64))
    return lambda impl: impl.conv2d_grad_weight(x, g, 1, 3, 3)


@case("conv2d fwd stride2 k4 4x16x64x64")
def _conv_s2():
    x = RNG.normal(size=(4, 16, 66, 66))
    w = RNG.normal(size=(32, 16, 4, 4))
    return lambda impl: impl.conv2d_forward(x, w, 2)


@case("maxpool2x fwd+bwd 4x32x64x64")
def _pool():
    x = RNG.normal(size=(4, 32, 64, 64))
    g = RNG.normal(size=(4, 32, 32, 32))

    def run(impl):
        out, idx = impl.maxpool2x_forward(x)
        return impl.maxpool2x_backward(g, idx)
    return run


@case("upsample2x fwd+bwd 4x64x16x16")
def _upsample():
    x = RNG.normal(size=(4, 64, 16, 16))
    g = RNG.normal(size=(4, 64, 32, 32))

    def run(impl):
        impl.upsample2x_forward(x)
        return impl.upsample2x_backward(g)
    return run


@case("min_sq_dists 1500x1500 (surfaces)")
def _dists():
    a = RNG.normal(size=(1500, 3)) * 20
    b = RNG.normal(size=(1500, 3)) * 20

    def run(impl):
        impl.min_sq_dists(a, b)
        return impl.min_sq_dists(b, a)
    return run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=30)
    args = ap.parse_args()

    print(f"active backend by env resolution: {active_backend()}")
    if _kernels_numba is None:
        print("numba unavailable: timing the numpy fallback only")

    header = f"{'kernel':38s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}  agree"
    print(header)
    print("-" * len(header))
    for name, builder in CASES:
        run = builder()
        t_np = timeit(lambda: run(_kernels_numpy), args.repeats)
        line = f"{name:38s} {t_np * 1e3:9.2f}ms"
        if _kernels_numba is not None:
            t_nb = timeit(lambda: run(_kernels_numba), args.repeats)
            a = run(_kernels_numba)
            b = run(_kernels_numpy)
            if isinstance(a, tuple):
                a, b = a[0], b[0]
            ok = np.allclose(a, b, rtol=1e-10, atol=1e-10)
            line += f" {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.2f}x  {'yes' if ok else 'NO'}"
        print(line)


if __name__ == "__main__":
    main()
