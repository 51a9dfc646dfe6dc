#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the numpy fallback.

Times forward / backward-input / backward-weights on encoder-realistic
shapes and a full training step with each backend, printing a comparison
table. Run from a built checkout:

    python benchmarks/bench_kernels.py [--repeats N] [--train-steps N]
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ssllab._kernels import numpy_impl

try:
    from ssllab._kernels import _convext
except ImportError:
    _convext = None

SHAPES = [
    # (input, kernels): conv1-style low-channel and conv2/3-style deep shapes
    ((112, 1, 16, 16), (8, 1, 3, 3)),
    ((112, 8, 8, 8), (16, 8, 3, 3)),
    ((64, 1, 48, 48), (16, 1, 3, 3)),
    ((64, 16, 24, 24), (32, 16, 3, 3)),
    ((64, 32, 12, 12), (64, 32, 3, 3)),
]


def timeit(fn, repeats):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1e3  # ms


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'shape':>24} {'op':>6} {'ext (ms)':>10} {'numpy (ms)':>11} {'speedup':>8}")
    totals = {"ext": 0.0, "numpy": 0.0}
    for xs, ws in SHAPES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        g = numpy_impl.conv2d_forward(x, w, 1, 1)
        ops = [
            ("fwd", lambda m: m.conv2d_forward(x, w, 1, 1)),
            ("bw-in", lambda m: m.conv2d_backward_input(g, w, xs, 1, 1)),
            ("bw-w", lambda m: m.conv2d_backward_weights(g, x, ws, 1, 1)),
        ]
        for name, op in ops:
            t_np = timeit(lambda: op(numpy_impl), repeats)
            totals["numpy"] += t_np
            if _convext is not None:
                t_ext = timeit(lambda: op(_convext), repeats)
                totals["ext"] += t_ext
                print(f"{str(xs):>24} {name:>6} {t_ext:>10.2f} {t_np:>11.2f} {t_np / t_ext:>7.2f}x")
            else:
                print(f"{str(xs):>24} {name:>6} {'n/a':>10} {t_np:>11.2f} {'':>8}")
    if _convext is not None:
        print(f"{'TOTAL':>24} {'':>6} {totals['ext']:>10.2f} {totals['numpy']:>11.2f} "
              f"{totals['numpy'] / totals['ext']:>7.2f}x")


def bench_train_step(steps):
    """End-to-end training-step cost under the currently selected backend."""
    from ssllab import kernel_backend
    from ssllab.data import generate_synthetic, make_splits
    from ssllab.methods import default_config
    from ssllab.model import EncoderConfig
    from ssllab.trainer import TrainConfig, train

    ds = generate_synthetic(120, 4, 16, seed=0)
    splits = make_splits(ds, 10, validation_fraction=0.1, seed=0)
    cfg = TrainConfig(total_iterations=steps, labeled_batch=8, unlabeled_ratio=7,
                      eval_every=10 ** 9, seed=0)
    enc = EncoderConfig(1, 16, (8, 16), False, 4)
    start = time.perf_counter()
    train(cfg, default_config("fixmatch"), splits, encoder_cfg=enc)
    per_step = (time.perf_counter() - start) / steps * 1e3
    print(f"\nfixmatch training step ({kernel_backend()} backend): {per_step:.1f} ms/step")
    print("rerun with SSLLAB_KERNELS=numpy to time the fallback end to end")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--train-steps", type=int, default=48)
    args = parser.parse_args()
    if _convext is None:
        print("compiled extension not built; timing the numpy fallback only\n")
    bench_kernels(args.repeats)
    bench_train_step(args.train_steps)


if __name__ == "__main__":
    main()
