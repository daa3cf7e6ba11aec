"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per (workload, backend) with the best-of-N wall time and the
speedup of the compiled backend. Outputs of the two backends are compared
for every workload.
"""
import argparse
import time

import numpy as np

from flowguide import _kernels_py, kernels
from flowguide.flow import FlowField
from flowguide.trajectory import sample_trajectories


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def workloads(rng):
    K, H, W, C = 8, 16, 16, 32
    flows = [FlowField(rng.normal(0, 1, (H, W)), rng.normal(0, 1, (H, W))) for _ in range(K - 1)]
    tset = sample_trajectories(flows, H, W, seed=0)
    order, offsets = tset.groups()
    n = K * H * W
    x = rng.normal(size=(n, C))
    heads = 4
    yield "trajectory attention", lambda m: m.grouped_attention(x, x, x, x, order, offsets, heads, True)

    frames = np.arange(n)
    frame_off = np.arange(0, n + 1, H * W)
    yield "per-frame attention", lambda m: m.grouped_attention(x, x, x, x, frames, frame_off, heads, False)

    all_off = np.array([0, n])
    yield "dense attention", lambda m: m.grouped_attention(x, x, x, x, frames, all_off, heads, False)

    img = rng.random((256, 256, 3))
    fx, fy = rng.normal(0, 4, (256, 256)), rng.normal(0, 4, (256, 256))
    yield "bilinear warp 256x256", lambda m: m.bilinear_warp(img, fx, fy)[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    backends = kernels.available()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'workload':<24}{'backend':<10}{'seconds':>10}{'speedup':>10}")
    for name, fn in workloads(rng):
        base, ref = best_of(lambda: fn(_kernels_py), args.repeat)
        print(f"{name:<24}{'python':<10}{base:>10.4f}{'':>10}")
        if "cython" in backends:
            t, out = best_of(lambda: fn(backends["cython"]), args.repeat)
            diff = float(np.abs(out - ref).max())
            print(f"{'':<24}{'cython':<10}{t:>10.4f}{base / t:>9.1f}x  (max diff {diff:.1e})")


if __name__ == "__main__":
    main()
