"""Timing comparison of the compiled kernels against the pure-numpy fallback.

Run:  python3 benchmarks/bench_kernels.py
"""
from __future__ import annotations

import time

import numpy as np

import eiflow._kernels.pyref as pyref

try:
    import eiflow._kernels._core as core
except ImportError:
    core = None


def timeit(fn, *args, repeats: int = 7) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.standard_normal((4, 32, 64, 64)).astype(np.float32)
    xpad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    coords = rng.uniform(-2, 66, size=(4, 2, 64, 64)).astype(np.float32)
    grad = rng.standard_normal((4, 32, 64, 64)).astype(np.float32)
    cols = pyref.im2col(xpad, 3, 3, 1)
    n_ev = 200_000
    xs = rng.integers(0, 64, n_ev)
    ys = rng.integers(0, 64, n_ev)
    pos = np.sort(rng.random(n_ev)) * 4.0  # bin positions for bins=5
    ps = rng.choice(np.array([-1, 1], np.int8), n_ev)
    yield "im2col 3x3 on (4,32,64,64)", (
        lambda: pyref.im2col(xpad, 3, 3, 1),
        None if core is None else (lambda: core.im2col(xpad, 3, 3, 1)))
    yield "col2im 3x3 on (4,32,64,64)", (
        lambda: pyref.col2im(cols, 66, 66, 3, 3, 1),
        None if core is None else (lambda: core.col2im(cols, 66, 66, 3, 3, 1)))
    yield "bilinear_gather (4,32,64,64)", (
        lambda: pyref.bilinear_gather(x, coords, False),
        None if core is None else (lambda: core.bilinear_gather(x, coords, False)))
    yield "bilinear_scatter (4,32,64,64)", (
        lambda: pyref.bilinear_scatter(grad, x, coords, False),
        None if core is None else (lambda: core.bilinear_scatter(grad, x, coords, False)))
    yield "voxel_accumulate 200k events", (
        lambda: pyref.voxel_accumulate(5, 64, 64, xs, ys, pos, ps),
        None if core is None else (lambda: core.voxel_accumulate(
            5, 64, 64, xs, ys, pos, ps)))


def main() -> None:
    rng = np.random.default_rng(0)
    if core is None:
        print("compiled backend unavailable; timing pure python only")
    print(f"{'kernel':36s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, (py_fn, c_fn) in cases(rng):
        t_py = timeit(py_fn)
        if c_fn is None:
            print(f"{name:36s} {t_py * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")
            continue
        t_c = timeit(c_fn)
        print(f"{name:36s} {t_py * 1e3:9.2f}ms {t_c * 1e3:9.2f}ms "
              f"{t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
