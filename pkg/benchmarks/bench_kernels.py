#!/usr/bin/env python3
"""Benchmark the numpy kernel backend against the compiled extension.

Times each of the six classifier kernels on production shapes (the
1024x1024 trace raster through the two conv/pool stages), plus a whole
forward pass, under both backends.  Prints a per-op table with the
numpy/compiled speedup so the auto-mode split is auditable: the fused
sparse first stage and the pooling ops win compiled, while the dense
convolution stays on numpy, whose tensordot lowers to BLAS.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--number N]
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from tlextract import kernels
from tlextract.cnn import (C1, C2, CONV2_OUT, KERNEL, POOL, cnn_forward,
                           init_model)
from tlextract.finetune import ArchSpec
from tlextract.raster import SIDE, rasterize
from tlextract.rng import stream
from tlextract.tracesim import build_profile, gen_trace


def best_of(fn, repeat: int, number: int) -> float:
    """Best mean seconds-per-call over `repeat` runs of `number` calls."""
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def production_inputs():
    """Op inputs with the shapes and sparsity the classifier really sees."""
    profile = build_profile("acme", "eager", ArchSpec(12, 768, 12), seed=0)
    image = rasterize(gen_trace(profile, seed=0))
    ys = image.ys.astype(np.int64)
    xs = image.xs.astype(np.int64)

    g = stream(0, "bench")
    wf = g.gaussian(C1 * KERNEL * KERNEL).astype(np.float32).reshape(
        C1, KERNEL, KERNEL)
    b1 = np.zeros(C1, dtype=np.float32)
    w2 = (g.gaussian(C2 * C1 * KERNEL * KERNEL).astype(np.float32)
          .reshape(C2, C1, KERNEL, KERNEL) * np.float32(0.1))
    b2 = np.zeros(C2, dtype=np.float32)
    return image, ys, xs, wf, b1, w2, b2


def build_cases(ops):
    """(name, zero-arg callable) pairs running each op on one backend."""
    image, ys, xs, wf, b1, w2, b2 = production_inputs()

    pooled1, src1, pre1 = ops.sparse_conv_pool_forward(
        ys, xs, wf, b1, SIDE, POOL)
    z2 = ops.conv2d_forward(pooled1, w2, b2)
    a2 = np.maximum(z2, 0)
    p2, src2 = ops.maxpool_forward(a2, POOL)
    g1 = np.ones_like(pooled1)
    g2 = np.ones_like(p2)

    return [
        ("sparse_conv_pool_forward",
         lambda: ops.sparse_conv_pool_forward(ys, xs, wf, b1, SIDE, POOL)),
        ("sparse_conv_pool_backward",
         lambda: ops.sparse_conv_pool_backward(g1, ys, xs, src1, pre1,
                                               KERNEL, SIDE)),
        ("conv2d_forward", lambda: ops.conv2d_forward(pooled1, w2, b2)),
        ("conv2d_backward", lambda: ops.conv2d_backward(pooled1, w2,
                                                        np.ones_like(z2))),
        ("maxpool_forward", lambda: ops.maxpool_forward(a2, POOL)),
        ("maxpool_backward",
         lambda: ops.maxpool_backward(g2, src2, CONV2_OUT, CONV2_OUT)),
    ]


def bench_forward(repeat: int, number: int) -> dict[str, float]:
    image = production_inputs()[0]
    model = init_model("vendor", ["acme", "globex"], seed=0)
    out = {}
    for backend in ("numpy", "compiled"):
        kernels.set_backend(backend)
        out[backend] = best_of(lambda: cnn_forward(model, image),
                               repeat, number)
    kernels.set_backend("auto")
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5,
                    help="timing runs per op (best wins)")
    ap.add_argument("--number", type=int, default=3,
                    help="calls per timing run")
    args = ap.parse_args(argv)

    if not kernels.HAVE_COMPILED:
        sys.stderr.write("compiled extension not built; nothing to "
                         "compare (pip install -e . rebuilds it)\n")
        return 1

    tables = {name: kernels.set_backend(name)
              for name in ("numpy", "compiled")}
    kernels.set_backend("auto")

    rows = []
    for name, _ in build_cases(tables["numpy"]):
        per = {}
        for backend, table in tables.items():
            case = dict(build_cases(table))[name]
            per[backend] = best_of(case, args.repeat, args.number)
        rows.append((name, per["numpy"], per["compiled"]))

    width = max(len(r[0]) for r in rows)
    print(f"{'op':<{width}}  {'numpy':>10}  {'compiled':>10}  "
          f"{'numpy/compiled':>14}")
    for name, t_np, t_c in rows:
        print(f"{name:<{width}}  {t_np * 1e3:>8.2f}ms  {t_c * 1e3:>8.2f}ms  "
              f"{t_np / t_c:>13.2f}x")

    fwd = bench_forward(args.repeat, args.number)
    print(f"\n{'cnn_forward (whole pass)':<{width}}  "
          f"{fwd['numpy'] * 1e3:>8.2f}ms  {fwd['compiled'] * 1e3:>8.2f}ms  "
          f"{fwd['numpy'] / fwd['compiled']:>13.2f}x")
    print("\nauto mode uses the compiled backend for the sparse fused "
          "stage and pooling,\nand numpy (BLAS tensordot) for the dense "
          "convolution.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
