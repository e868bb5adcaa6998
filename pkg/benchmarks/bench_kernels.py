"""Time the numba and numpy flavour of every hot kernel on the shapes the
default network and resamplers actually see.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from resdistill import kernels
from resdistill.resize import _weight_table


def _time(fn, args, repeat):
    fn(*args)  # warm-up, includes numba compilation
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    # stem of the default network on a batch of eight 256 px images
    xp = rng.normal(size=(8, 3, 258, 258)).astype(np.float32)
    yield "im2col 3x3/s2 8x3x256x256", "im2col", (xp, 3, 2, 128, 128)
    cols = rng.normal(size=(8, 16, 16, 64, 3, 3)).astype(np.float32)
    yield "col2im 3x3/s1 8x64x16x16", "col2im", (cols, 18, 18, 1)
    fmap = rng.normal(size=(8 * 128, 8, 8)).astype(np.float32)
    yield "max pool 8x8->1x1 x1024", "adaptive_max_pool_2d", (fmap, 1, 1)
    rows = rng.uniform(size=(3 * 256, 256))
    idx, w = _weight_table(256, 32, "lanczos")
    yield "lanczos rows 768x256->32", "resample_rows", (rows, idx, w)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, name, call_args in cases(rng):
        t_np = _time(getattr(kernels, name + "_numpy"), call_args, args.repeat)
        t_nb = _time(getattr(kernels, name + "_numba"), call_args, args.repeat)
        print(f"{label:32s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
