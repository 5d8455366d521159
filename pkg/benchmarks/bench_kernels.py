"""Compare the numba and numpy kernel backends on the hot paths.

Runs each kernel on realistic shapes, times best-of-repeats per backend, and
checks both produce the same numbers. Usage::

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from evseg.kernels import numba_impl, numpy_impl


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _bench(name, make_args, run, check, repeats):
    args = make_args()
    run(numba_impl, *args)  # trigger jit before timing
    t_nb = _best_of(lambda: run(numba_impl, *args), repeats)
    t_np = _best_of(lambda: run(numpy_impl, *args), repeats)
    ok = check(run(numba_impl, *args), run(numpy_impl, *args))
    print(f"{name:28s} numba {1e3 * t_nb:8.2f} ms   numpy {1e3 * t_np:8.2f} ms   "
          f"speedup {t_np / t_nb:6.1f}x   match={'yes' if ok else 'NO'}")
    return ok


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    ok = True

    def voxel_args():
        n = 200_000
        return (rng.integers(0, 64, n), rng.integers(0, 64, n),
                rng.uniform(0, 4, n), rng.choice([-1.0, 1.0], n))

    ok &= _bench(
        "voxel_accumulate 200k ev", voxel_args,
        lambda m, xs, ys, tn, ps: m.voxel_accumulate(xs, ys, tn, ps, 5, 64, 64),
        lambda a, b: np.allclose(a, b, atol=1e-9), args.repeats)

    def automaton_args():
        frames = np.cumsum(rng.normal(0, 0.08, (101, 64, 64)), axis=0) + 1.0
        ts = np.linspace(0, 200_000, 101).astype(np.int64)
        return frames, ts, 0.2

    def run_automaton(m, frames, ts, theta):
        return np.stack(m.event_automaton(frames, ts, theta))

    ok &= _bench(
        "event_automaton 100 frames", automaton_args, run_automaton,
        lambda a, b: a.shape == b.shape and np.array_equal(a, b), args.repeats)

    x = rng.normal(0, 1, (24, 34, 34)).astype(np.float32)
    w = rng.normal(0, 0.1, (32, 24, 3, 3)).astype(np.float32)
    b = rng.normal(0, 0.1, 32).astype(np.float32)
    dy = rng.normal(0, 1, (32, 32, 32)).astype(np.float32)

    ok &= _bench(
        "conv2d_forward 24->32 @32^2", lambda: (x, w, b),
        lambda m, x_, w_, b_: m.conv2d_forward(x_, w_, b_, 1),
        lambda a, c: np.allclose(a, c, rtol=1e-4, atol=1e-4), args.repeats)
    ok &= _bench(
        "conv2d_backward_input", lambda: (dy, w),
        lambda m, dy_, w_: m.conv2d_backward_input(dy_, w_, 1, 34, 34),
        lambda a, c: np.allclose(a, c, rtol=1e-4, atol=1e-4), args.repeats)
    ok &= _bench(
        "conv2d_backward_params", lambda: (dy, x),
        lambda m, dy_, x_: np.concatenate(
            [g.ravel() for g in m.conv2d_backward_params(dy_, x_, 1, 3)]),
        lambda a, c: np.allclose(a, c, rtol=1e-3, atol=1e-3), args.repeats)

    print("all kernels match" if ok else "MISMATCH between backends")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
