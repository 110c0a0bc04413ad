#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Runs each hot kernel on image-scale inputs and prints per-call times and the
native speedup. Usage:

    python benchmarks/bench_backends.py [--height 512] [--width 512]
                                        [--samples 10] [--centers 100]
                                        [--repeats 5]
"""

import argparse
import time

import numpy as np

from panu import _kernels


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--height", type=int, default=512)
    parser.add_argument("--width", type=int, default=512)
    parser.add_argument("--samples", type=int, default=10)
    parser.add_argument("--centers", type=int, default=100)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = _kernels.backends()
    if "native" not in backends:
        print("compiled backend not available; benchmarking the fallback only")

    n = args.height * args.width
    rng = np.random.default_rng(0)
    samples = rng.normal(size=(n, args.samples, 2)) * 3
    gt = rng.normal(size=(n, 2)) * 3
    targets = rng.uniform(0, args.height, size=(n, 2))
    centers = rng.uniform(0, args.height, size=(args.centers, 2))
    votes = rng.integers(0, args.centers, size=(n, args.samples)).astype(np.int64)
    heat = rng.random((args.height, args.width))
    conf = rng.random(n)
    acc = (rng.random(n) < conf).astype(np.float64)

    cases = [
        ("es_per_pixel", lambda mod: mod.es_per_pixel(samples, gt)),
        ("es_grad", lambda mod: mod.es_grad(samples, gt)),
        ("nearest_center", lambda mod: mod.nearest_center(targets, centers)),
        ("mode_votes", lambda mod: mod.mode_votes(votes, args.centers)),
        ("nms_peaks", lambda mod: mod.nms_peaks(heat, 0.1, 7)),
        ("bin_stats", lambda mod: mod.bin_stats(conf, acc, 10)),
    ]

    print(f"image {args.height}x{args.width} ({n} px), M={args.samples}, "
          f"K={args.centers}, best of {args.repeats}")
    header = f"{'kernel':16s} " + "".join(f"{name:>12s}" for name in backends) + f"{'speedup':>10s}"
    print(header)
    for name, call in cases:
        times = {bname: _time(lambda mod=mod: call(mod), args.repeats) for bname, mod in backends.items()}
        row = f"{name:16s} " + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if "native" in times and "fallback" in times:
            row += f"{times['fallback'] / times['native']:9.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
