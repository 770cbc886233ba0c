"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from bmae import _kernels_py

try:
    from bmae import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    patches = rng.standard_normal((128, 256, 32))
    protos = rng.standard_normal((160, 32))
    counts = rng.integers(1, 3, 4000).astype(np.int64)
    order = rng.permutation(4000).astype(np.int64)
    field = rng.standard_normal((64, 256, 160))
    return {
        "max_cosine_pool B=128 N=256 K=160 D=32": lambda m: m.max_cosine_pool(patches, protos),
        "trim_counts 4000 recordings, cap 500": lambda m: m.trim_counts(counts, 500, 1, order),
        "argmax_mid 64x256x160": lambda m: m.argmax_mid(field),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<42} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, fn in cases(rng).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<42} {py:>10.2f} {'-':>10} {'-':>8}")
            continue
        cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<42} {py:>10.2f} {cy:>10.2f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
