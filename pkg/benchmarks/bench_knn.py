"""Benchmark the voxel vote kernel: compiled extension vs pure-python
fallback.

Usage::

    python3 benchmarks/bench_knn.py [--sizes 250,500,1000,2000] [--k 16]
"""

import argparse
import time

import numpy as np

from fusecond import _voxel_core_py


def random_lattice(gen, n, grid):
    flat = gen.choice(grid**3, size=n, replace=False)
    flat.sort()
    return np.stack(np.unravel_index(flat, (grid,) * 3), axis=1).astype(np.int64)


def bench(fn, positions, selected, k, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(positions, selected, k)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="250,500,1000,2000")
    parser.add_argument("--k", type=int, default=16)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = [("python", _voxel_core_py.knn_vote_counts)]
    try:
        from fusecond import _voxel_core

        backends.append(("cython", _voxel_core.knn_vote_counts))
    except ImportError:
        print("compiled extension unavailable; benchmarking fallback only")

    gen = np.random.default_rng(args.seed)
    sizes = [int(s) for s in args.sizes.split(",")]
    print(f"{'n':>6}  " + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for n in sizes:
        grid = max(8, int(np.ceil(n ** (1 / 3))) + 2)
        positions = random_lattice(gen, n, grid)
        selected = gen.random(n) < 0.4
        times = [bench(fn, positions, selected, args.k) for _, fn in backends]
        outputs = [fn(positions, selected, args.k) for _, fn in backends]
        for out in outputs[1:]:
            assert np.array_equal(out, outputs[0]), "backend outputs diverge"
        row = f"{n:>6}  " + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:>8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
