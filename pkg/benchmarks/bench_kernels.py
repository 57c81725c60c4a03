#!/usr/bin/env python3
"""Benchmark the convolution kernels under both backends.

Runs conv2d forward/backward at a few representative shapes with the
numba backend and the pure-numpy fallback, and prints a timing table.
Backends are selected via the FLOWSR_BACKEND environment variable, which
kernels.py reads at import time, so each backend runs in a subprocess.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys

SHAPES = [
    # (B, Cin, Cout, H, W, k)   label
    (8, 1, 32, 16, 16, 3),
    (8, 32, 32, 16, 16, 3),
    (8, 32, 64, 8, 8, 3),
    (2, 32, 32, 64, 64, 3),
]

_WORKER = r"""
import json, sys, time
import numpy as np
from flowsr import kernels

shapes = json.loads(sys.argv[1])
repeats = int(sys.argv[2])
rows = []
for (B, Cin, Cout, H, W, k) in shapes:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((B, Cin, H, W))
    w = rng.standard_normal((Cout, Cin, k, k))
    g = rng.standard_normal((B, Cout, H, W))
    for fn, args in (
        ("forward", (x, w)),
        ("backward_x", (g, w)),
        ("backward_w", (g, x, k, k)),
    ):
        call = getattr(kernels, "conv2d_" + fn)
        call(*args)  # warm-up (triggers jit compilation on numba)
        t0 = time.perf_counter()
        for _ in range(repeats):
            call(*args)
        dt = (time.perf_counter() - t0) / repeats
        rows.append({"shape": [B, Cin, Cout, H, W, k], "op": fn, "sec": dt})
print(json.dumps({"backend": kernels.BACKEND, "rows": rows}))
"""


def run_backend(backend, repeats):
    env = dict(os.environ, FLOWSR_BACKEND=backend)
    out = subprocess.run(
        [sys.executable, "-c", _WORKER, json.dumps(SHAPES), str(repeats)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    results = {}
    for backend in ("numpy", "numba"):
        try:
            results[backend] = run_backend(backend, args.repeats)
        except subprocess.CalledProcessError as exc:
            print(f"{backend} backend failed:\n{exc.stderr}", file=sys.stderr)
            if backend == "numpy":
                return 1
    if "numba" not in results:
        print("numba unavailable; only numpy timings shown")

    header = f"{'shape (B,Cin,Cout,H,W,k)':<28} {'op':<11}"
    for backend in results:
        header += f" {backend + ' (ms)':>12}"
    if len(results) == 2:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))

    n = len(results["numpy"]["rows"])
    for i in range(n):
        ref = results["numpy"]["rows"][i]
        line = f"{str(tuple(ref['shape'])):<28} {ref['op']:<11}"
        for backend in results:
            line += f" {results[backend]['rows'][i]['sec'] * 1e3:>12.3f}"
        if len(results) == 2:
            nb = results["numba"]["rows"][i]["sec"]
            line += f" {ref['sec'] / nb:>8.2f}x"
        print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
