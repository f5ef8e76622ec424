"""Compare the Cython kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--points 2000 8000]

Prints the best-of-``repeat`` wall time per kernel, backend and problem size,
and checks that both backends return identical arrays.
"""
import argparse
import time

import numpy as np

from sparsetooth import _kernels_py, kernels
from sparsetooth.camera import default_cameras, project_points
from sparsetooth.synthgen import JawConfig, generate_jaw

try:
    from sparsetooth import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def scan_with(points):
    per_tooth = max(1, (points * 7) // (10 * 14))
    return generate_jaw(JawConfig(points_per_tooth=per_tooth, gingiva_points=points - 14 * per_tooth))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, nargs="+", default=[2000, 8000])
    ap.add_argument("--size", type=int, default=256, help="square render size")
    args = ap.parse_args()

    backends = [("python", _kernels_py)]
    if _kernels_c is not None:
        backends.insert(0, ("cython", _kernels_c))
    else:
        print("Cython extension not built; timing the NumPy fallback only")

    print(f"{'kernel':<8} {'points':>7} {'backend':<8} {'seconds':>10} {'speedup':>8}")
    for n in args.points:
        scan = scan_with(n)
        pos = scan.positions.astype(np.float64)
        cam = default_cameras(scan, 1, (args.size, args.size))[0]
        u, v, z, front = project_points(pos, cam)
        valid = front.astype(np.uint8)
        jobs = {
            "splat": lambda m: kernels.splat_zbuffer(u, v, z, valid, args.size, args.size, 1, impl=m),
            "knn": lambda m: kernels.knn_query(pos, pos, 16, impl=m),
        }
        for name, job in jobs.items():
            results = {}
            for label, mod in backends:
                results[label] = best_time(lambda: job(mod), args.repeat)
            ref = results["python"][0]
            for label, (secs, _) in results.items():
                print(f"{name:<8} {scan.num_points:>7} {label:<8} {secs:>10.5f} {ref / secs:>7.1f}x")
            if len(results) == 2:
                a, b = results["cython"][1], results["python"][1]
                same = all(np.array_equal(x, y) for x, y in zip(a, b))
                print(f"{'':<8} {'':>7} outputs identical: {same}")


if __name__ == "__main__":
    main()
