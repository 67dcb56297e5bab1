"""Benchmark the compiled kernels against the numpy fallback.

Run as `python -m hdrf.bench [--rays N] [--samples S] [--width W] [--reps R]`.
Times the kernel interface (positional encoding, dense layer forward and
backward, compositing forward and backward) on training-shaped inputs for
each available backend and prints the speedups.
"""

import argparse
import time

import numpy as np

from . import kernels


def _time(fn, reps: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def _cases(ops, rays: int, samples: int, width: int):
    rng = np.random.default_rng(0)
    m = rays * samples
    x = rng.standard_normal((m, 63))
    w = rng.standard_normal((63, width)) * 0.1
    b = rng.standard_normal(width) * 0.1
    y = ops["dense_forward"](x, w, b, kernels.ACT_RELU)
    dy = rng.standard_normal(y.shape)
    sigma = rng.random((rays, samples)) * 2.0
    values = rng.random((rays, samples, 3))
    deltas = np.full((rays, samples), 0.05)
    deltas[:, -1] = 1e10
    _, weights, trans, tlast = ops["composite_forward"](sigma, values, deltas)
    d_out = rng.standard_normal((rays, 3))
    pts = rng.uniform(-1, 1, (m, 3))
    return {
        "posenc (L=10)": lambda: ops["posenc"](pts, 10, True),
        "dense fwd relu": lambda: ops["dense_forward"](x, w, b, kernels.ACT_RELU),
        "dense fwd sigm": lambda: ops["dense_forward"](x, w, b, kernels.ACT_SIGMOID),
        "dense bwd": lambda: ops["dense_backward"](x, w, y, dy, kernels.ACT_RELU, True),
        "composite fwd": lambda: ops["composite_forward"](sigma, values, deltas),
        "composite bwd": lambda: ops["composite_backward"](values, deltas, weights, trans, tlast, d_out),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rays", type=int, default=256)
    parser.add_argument("--samples", type=int, default=64)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--reps", type=int, default=30)
    args = parser.parse_args(argv)

    available = kernels.backends()
    print(f"selected backend: {kernels.backend()}")
    print(f"shapes: {args.rays} rays x {args.samples} samples, width {args.width}\n")
    py_cases = _cases(available["python"], args.rays, args.samples, args.width)
    nat_cases = (
        _cases(available["native"], args.rays, args.samples, args.width)
        if "native" in available
        else None
    )

    header = f"{'kernel':16s} {'python':>12s} {'native':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for name, py_fn in py_cases.items():
        t_py = _time(py_fn, args.reps)
        if nat_cases is None:
            print(f"{name:16s} {t_py * 1e3:10.3f} ms {'-':>12s} {'-':>9s}")
        else:
            t_nat = _time(nat_cases[name], args.reps)
            print(f"{name:16s} {t_py * 1e3:10.3f} ms {t_nat * 1e3:10.3f} ms {t_py / t_nat:8.2f}x")
    if nat_cases is None:
        print("\ncompiled backend not available; build it with `pip install -e .`")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
