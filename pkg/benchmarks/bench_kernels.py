"""Time the raster kernels on the numba and numpy backends.

    python3 benchmarks/bench_kernels.py --rows 500 --cols 500 --sizes 1,3,5,9
"""
import argparse
import time

import numpy as np

from terracast import _accel


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=500)
    ap.add_argument("--cols", type=int, default=500)
    ap.add_argument("--classes", type=int, default=7)
    ap.add_argument("--sizes", default="1,3,5,9")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    cells = rng.integers(0, args.classes + 1, (args.rows, args.cols))
    backends = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])
    print(f"grid {args.rows}x{args.cols}, K={args.classes}, best of {args.repeats} (seconds)")
    print(f"{'kernel':<22}{'size':>5}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for size in map(int, args.sizes.split(",")):
        jobs = {
            "class_sums counts": lambda: _accel.class_sums(cells, args.classes, size, False),
            "class_sums exp": lambda: _accel.class_sums(cells, args.classes, size, True),
            "frontier": lambda: _accel.frontier(cells, size),
        }
        for name, fn in jobs.items():
            row = {}
            for b in backends:
                _accel.set_backend(b)
                fn()  # warm-up, includes numba compilation
                row[b] = best_of(fn, args.repeats)
            speedup = f"{row['numpy'] / row['numba']:>9.1f}x" if "numba" in row else ""
            print(f"{name:<22}{size:>5}" + "".join(f"{row[b]:>12.4f}" for b in backends) + speedup)


if __name__ == "__main__":
    main()
