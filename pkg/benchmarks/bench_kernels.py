"""Compiled vs pure-Python Jacobi kernel: wall time for svd/pinv on calibration-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from snstitch import linalg

SHAPES = [(64, 64), (400, 32), (800, 64), (1600, 64)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    backends = ["python"] + (["cython"] if linalg.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled kernel not built; timing the Python fallback only")
    print(f"{'shape':>12} " + " ".join(f"{b:>10}" for b in backends) + "   speedup  max|diff|")
    for shape in SHAPES:
        a = linalg.make_rng(0).normal(size=shape)
        t = {b: best_of(lambda b=b: linalg.pinv(a, backend=b), args.repeat) for b in backends}
        ps = {b: linalg.pinv(a, backend=b) for b in backends}
        row = f"{str(shape):>12} " + " ".join(f"{t[b]:>9.4f}s" for b in backends)
        if "cython" in t:
            diff = np.abs(ps["python"] - ps["cython"]).max()
            row += f"   {t['python'] / t['cython']:>6.1f}x  {diff:.1e}"
        print(row)


if __name__ == "__main__":
    main()
