"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--texts 2000] [--dim 64] [--repeat 5]
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from listrerank import _kernels_py
from listrerank.dataset import synthesize_dataset


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--texts", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    try:
        from listrerank import _kernels
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1

    ds = synthesize_dataset(0, max(1, args.texts // 9))
    texts = ds.texts()[: args.texts]
    labels = np.random.default_rng(0).integers(0, 2, size=1000)
    chars = sum(len(t) for t in texts)

    cases = [
        (f"trigram_counts_many ({len(texts)} texts, {chars} chars)", lambda k: k.trigram_counts_many(texts, args.dim)),
        ("average_precision_ranked (1000 items, x200)", lambda k: [k.average_precision_ranked(labels) for _ in range(200)]),
    ]
    np.testing.assert_array_equal(_kernels.trigram_counts_many(texts, args.dim), _kernels_py.trigram_counts_many(texts, args.dim))

    print(f"{'kernel':<52} {'python ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name, fn in cases:
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        c = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<52} {py:>10.2f} {c:>12.2f} {py / c:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
