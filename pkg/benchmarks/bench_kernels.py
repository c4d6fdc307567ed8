#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the NumPy fallback.

Times representative convolution shapes from the network (stem, strided
depthwise, pointwise, large-kernel depthwise) plus one full training step,
checks that both backends agree numerically, and prints a speedup table.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

import pmaa.kernels as kernels


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


CONV_CASES = [
    # label, (n, ci, h, w), co, k, stride, groups
    ("stem 12->16 k3", (4, 12, 64, 64), 16, 3, 1, 1),
    ("pointwise 16->16", (4, 16, 64, 64), 16, 1, 1, 1),
    ("depthwise k3 s2", (4, 16, 64, 64), 16, 3, 2, 16),
    ("depthwise k11", (4, 16, 64, 64), 16, 11, 1, 16),
    ("head 16->4 k3", (4, 16, 64, 64), 4, 3, 1, 1),
]


def bench_convs(repeats):
    rows = []
    rng = np.random.default_rng(0)
    for label, xshape, co, k, stride, groups in CONV_CASES:
        n, ci, h, w = xshape
        x = rng.uniform(-1, 1, xshape)
        wt = rng.uniform(-1, 1, (co, ci // groups, k, k))
        pad = (k // 2, k // 2)
        go = kernels.conv2d_forward(x, wt, (stride, stride), pad, groups)

        times = {}
        outs = {}
        for backend in kernels.available_backends():
            kernels.use_backend(backend)
            times[backend] = {
                "forward": time_call(
                    lambda: kernels.conv2d_forward(x, wt, (stride, stride), pad, groups),
                    repeats),
                "bwd_input": time_call(
                    lambda: kernels.conv2d_backward_input(
                        go, wt, x.shape, (stride, stride), pad, groups), repeats),
                "bwd_weight": time_call(
                    lambda: kernels.conv2d_backward_weight(
                        go, x, wt.shape, (stride, stride), pad, groups), repeats),
            }
            outs[backend] = kernels.conv2d_forward(x, wt, (stride, stride), pad, groups)
        if len(outs) == 2:
            delta = np.max(np.abs(outs["numpy"] - outs["compiled"]))
            assert delta < 1e-10, f"{label}: backends disagree by {delta}"
        rows.append((label, times))
    return rows


def bench_training_step(repeats):
    from pmaa.model import ModelConfig, PmaaModel
    from pmaa.tensor import Tensor, backward
    from pmaa.train import AdamW, l1_loss

    rng = np.random.default_rng(1)
    xs = [Tensor(rng.uniform(-1, 1, (4, 4, 64, 64))) for _ in range(3)]
    target = Tensor(rng.uniform(-1, 1, (4, 4, 64, 64)))
    times = {}
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        model = PmaaModel(ModelConfig(hidden_channels=16, downsamples=3, stages=2,
                                      height=64, width=64), seed=0)
        optim = AdamW(model.params.parameters())

        def step():
            pred, _ = model(*xs)
            loss = l1_loss(pred, target)
            optim.zero_grad()
            backward(loss)
            optim.step(5e-4)

        step()  # warm up
        times[backend] = time_call(step, repeats)
    return times


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"available backends: {', '.join(backends)} (default: {kernels.active_backend()})")
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy backend only")

    default = kernels.active_backend()
    try:
        print(f"\nconvolution kernels (best of {args.repeats}, ms):")
        header = f"{'case':<22}{'pass':<12}" + "".join(f"{b:>12}" for b in backends)
        if len(backends) == 2:
            header += f"{'speedup':>10}"
        print(header)
        for label, times in bench_convs(args.repeats):
            for phase in ("forward", "bwd_input", "bwd_weight"):
                row = f"{label:<22}{phase:<12}"
                for b in backends:
                    row += f"{times[b][phase] * 1e3:>12.3f}"
                if len(backends) == 2:
                    row += f"{times['numpy'][phase] / times['compiled'][phase]:>9.2f}x"
                print(row)

        print(f"\nfull training step (batch 4, 64x64, two stages; best of {args.repeats}, s):")
        step_times = bench_training_step(args.repeats)
        for b, t in step_times.items():
            print(f"  {b:<10}{t:.3f}")
        if len(step_times) == 2:
            print(f"  speedup   {step_times['numpy'] / step_times['compiled']:.2f}x")
    finally:
        kernels.use_backend(default)


if __name__ == "__main__":
    main()
