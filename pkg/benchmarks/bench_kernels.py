#!/usr/bin/env python3
"""Compare the compiled kernel backend against the numpy fallback.

Times the four convolution/pooling kernels at the two widths the
pipeline actually runs (reduced desk-scale width and the full
configuration-B width), plus one full CNN training step at each width.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from writerid import cnn, kernels, kernels_numpy


def timeit(fn, repeats):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(backend, repeats, rng):
    cases = {
        "conv1 reduced (64,1,32,32) k7 f8": ((64, 1, 32, 32), (8, 1, 7, 7)),
        "conv2 reduced (64,8,13,13) k5 f16": ((64, 8, 13, 13), (16, 8, 5, 5)),
        "conv1 full    (64,1,32,32) k7 f16": ((64, 1, 32, 32), (16, 1, 7, 7)),
        "conv2 full    (64,16,13,13) k5 f256": ((64, 16, 13, 13), (256, 16, 5, 5)),
    }
    rows = {}
    for name, (xs, ws) in cases.items():
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        b = np.zeros(ws[0], dtype=np.float32)
        dout = backend.conv2d_forward(x, w, b)
        rows[f"{name} fwd"] = timeit(lambda: backend.conv2d_forward(x, w, b), repeats)
        rows[f"{name} bwd"] = timeit(lambda: backend.conv2d_backward(x, w, dout), repeats)
    x = rng.normal(size=(64, 8, 26, 26)).astype(np.float32)
    pooled, sw = backend.maxpool_forward(x, 2)
    rows["maxpool fwd (64,8,26,26) p2"] = timeit(lambda: backend.maxpool_forward(x, 2), repeats)
    rows["maxpool bwd (64,8,26,26) p2"] = timeit(
        lambda: backend.maxpool_backward(pooled, sw, 26, 26), repeats
    )
    return rows


def bench_train_step(repeats, rng, widths):
    """One loss_and_gradients call per backend at the given widths."""
    rows = {}
    x = rng.uniform(0, 1, size=(64, 32, 32)).astype(np.float32)
    y = rng.integers(0, 4, size=64)
    for label, (f1, f2, hid) in widths.items():
        cfg = cnn.CnnConfig.preset("B", c1_filters=f1, c2_filters=f2,
                                   hidden_nodes=hid, num_classes=4)
        model = cnn.initialize_model(cfg, seed=0)
        for name, backend in kernels.available_backends().items():
            cnn.K = backend  # swap the kernel module under the CNN
            rows.setdefault(f"train step {label}", {})[name] = timeit(
                lambda: cnn.loss_and_gradients(model, (x, y)), repeats
            )
    cnn.K = kernels
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"active backend: {kernels.BACKEND}; available: {sorted(backends)}")
    if "compiled" not in backends:
        print("compiled extension not built; showing numpy fallback only")

    rng = np.random.default_rng(0)
    results = {name: bench_kernels(mod, args.repeats, np.random.default_rng(0))
               for name, mod in backends.items()}

    names = list(next(iter(results.values())))
    width = max(len(n) for n in names)
    header_backends = sorted(results)
    print(f"\n{'kernel':<{width}}  " + "  ".join(f"{b:>10}" for b in header_backends)
          + ("   speedup" if len(header_backends) == 2 else ""))
    for name in names:
        cells = [results[b][name] for b in header_backends]
        line = f"{name:<{width}}  " + "  ".join(f"{c * 1e3:8.2f}ms" for c in cells)
        if len(cells) == 2:
            compiled, numpy_t = results["compiled"][name], results["numpy"][name]
            line += f"   {numpy_t / compiled:6.2f}x"
        print(line)

    widths = {"reduced (8/16/32)": (8, 16, 32), "full (16/256/64)": (16, 256, 64)}
    steps = bench_train_step(args.repeats, rng, widths)
    print()
    for label, by_backend in steps.items():
        cells = "  ".join(f"{b}={t * 1e3:7.1f}ms" for b, t in sorted(by_backend.items()))
        extra = ""
        if len(by_backend) == 2:
            extra = f"   {by_backend['numpy'] / by_backend['compiled']:6.2f}x"
        print(f"{label:<28} {cells}{extra}")


if __name__ == "__main__":
    main()
