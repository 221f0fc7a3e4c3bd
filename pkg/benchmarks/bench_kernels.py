"""Time the compiled kernels against their numpy twins.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--seed S]
"""

import argparse
import time

import numpy as np

from typorec import kernels
from typorec.match import KDTree


def _best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    img = rng.integers(0, 256, (256, 256), dtype=np.uint8)
    qb = rng.integers(0, 256, (500, 32), dtype=np.uint8)
    tb = rng.integers(0, 256, (5000, 32), dtype=np.uint8)
    qf = rng.random((300, 128), dtype=np.float32)
    tf = rng.random((3000, 128), dtype=np.float32)
    offsets_b = np.linspace(0, len(tb), 51).astype(np.int64)
    offsets_f = np.linspace(0, len(tf), 31).astype(np.int64)
    lowd = rng.random((20000, 8), dtype=np.float32)
    lowq = rng.random((500, 8), dtype=np.float32)
    return {
        "fast_response 256x256": lambda m: m.fast_response(img, 20, 3),
        "hamming_top2 500x5000x256b": lambda m: m.hamming_top2(qb, tb, offsets_b),
        "l2_top2 300x3000x128d": lambda m: m.l2_top2(qf, tf, offsets_f),
        "kdtree_top2 500q 20000x8d": lambda m: _kdtree_query(m, lowd, lowq),
    }


def _kdtree_query(module, data, query):
    tree = KDTree(data, "L2", leaf_size=16)
    saved = kernels.kdtree_top2
    kernels.kdtree_top2 = module.kdtree_top2
    try:
        tree.query2(query)
    finally:
        kernels.kdtree_top2 = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    backends = kernels.backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy kernels only")
    rng = np.random.default_rng(args.seed)
    names = list(backends)
    print(f"{'kernel':<30}" + "".join(f"{n:>12}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases(rng).items():
        times = [_best_of(lambda: fn(backends[n]), args.repeats) for n in names]
        row = f"{label:<30}" + "".join(f"{t:>11.4f}s" for t in times)
        if len(times) > 1:
            row += f"   {times[0] / times[1]:>6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
