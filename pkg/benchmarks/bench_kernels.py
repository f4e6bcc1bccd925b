"""Timing comparison for the two hot kernels across backends.

Runs the forward scorer and the weighted-gradient accumulator on a sweep
of batch sizes, once with the compiled extension and once with the numpy
reference, and prints per-call medians plus an agreement check.

The two backends trade places depending on batch shape. At rollout-sized
batches (4-row candidate segments, issued thousands of times per
iteration) the compiled gradient wins and the scorers tie; at update-sized
batches (hundreds of rows) numpy's BLAS matmul wins because the compiled
loops keep a fixed left-to-right accumulation order that cannot be
SIMD-vectorized. That order is the point: it gives bit-identical results
on any machine regardless of the local BLAS build, which is why the
import-time default prefers the compiled extension. Neither kernel
dominates end-to-end training time; episode simulation does.

Usage: python benchmarks/bench_kernels.py [--rows 4,16,64,256] [--repeat K]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from chainrft._kernels import backend_name, reference

try:
    from chainrft._kernels import _fast
except ImportError:
    _fast = None


def make_inputs(rows: int, hidden: int = 16, dim: int = 75, seed: int = 0):
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((hidden, dim)) * 0.3
    b1 = rng.standard_normal(hidden) * 0.1
    w2 = rng.standard_normal(hidden) * 0.3
    b2 = 0.05
    X = rng.standard_normal((rows, dim)) * 0.5
    coeff = rng.standard_normal(rows)
    return W1, b1, w2, b2, X, coeff


def median_time(fn, args, repeat: int, inner: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        times.append((time.perf_counter() - t0) / inner)
    return float(np.median(times))


def agreement(rows: int) -> float:
    W1, b1, w2, b2, X, coeff = make_inputs(rows, seed=rows)
    worst = float(np.max(np.abs(
        _fast.mlp_scores(W1, b1, w2, b2, X)
        - reference.mlp_scores(W1, b1, w2, b2, X))))
    g_fast = _fast.mlp_grad(W1, b1, w2, b2, X, coeff)
    g_ref = reference.mlp_grad(W1, b1, w2, b2, X, coeff)
    for a, b in zip(g_fast, g_ref):
        worst = max(worst, float(np.max(np.abs(np.asarray(a) - np.asarray(b)))))
    return worst


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=str, default="4,16,64,256",
                    help="comma-separated batch sizes "
                         "(rollouts score 4-row segments, updates ~256)")
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--inner", type=int, default=300)
    args = ap.parse_args()
    sizes = [int(s) for s in args.rows.split(",")]

    print(f"active backend: {backend_name()}")
    if _fast is None:
        print("compiled extension not available; nothing to compare")
        return

    worst = max(agreement(n) for n in sizes)
    print(f"max |compiled - reference| over scores and grads: {worst:.3e}")

    header = f"{'kernel':<12} {'rows':>5} {'compiled':>12} {'reference':>12} {'speedup':>9}"
    print(f"\n{header}")
    for name, fn_fast, fn_ref, with_coeff in (
            ("mlp_scores", _fast.mlp_scores, reference.mlp_scores, False),
            ("mlp_grad", _fast.mlp_grad, reference.mlp_grad, True)):
        for n in sizes:
            W1, b1, w2, b2, X, coeff = make_inputs(n)
            call_args = (W1, b1, w2, b2, X, coeff) if with_coeff else (W1, b1, w2, b2, X)
            inner = max(args.inner // max(n // 16, 1), 20)
            t_fast = median_time(fn_fast, call_args, args.repeat, inner)
            t_ref = median_time(fn_ref, call_args, args.repeat, inner)
            print(f"{name:<12} {n:>5} {t_fast * 1e6:>10.1f}us {t_ref * 1e6:>10.1f}us "
                  f"{t_ref / t_fast:>8.2f}x")


if __name__ == "__main__":
    main()
