"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np
from scipy.spatial.transform import Rotation

from scrprior import kernels


def workloads(rng):
    ro = rng.uniform(-3, 3, size=(60, 3))
    ru = rng.normal(size=(60, 3))
    rv = np.cross(ru, rng.normal(size=(60, 3)))
    dirs = rng.normal(size=(4800, 3))
    a, b = rng.normal(size=(5120, 3)), rng.normal(size=(5120, 3))
    rots = Rotation.random(64, random_state=0).as_matrix()
    trans = rng.normal(size=(64, 3)) + [0, 0, 4]
    pts = rng.normal(size=(4800, 3))
    px = rng.uniform(0, 640, size=(4800, 2))
    k4 = np.array([500.0, 500.0, 320.0, 240.0])
    return {
        "raycast 4800 rays x 60 rects": lambda impl: kernels.raycast_rectangles(
            np.zeros(3), dirs, ro, ru, rv, impl=impl),
        "nearest 5120 x 5120": lambda impl: kernels.nearest_sqdist(a, b, impl=impl),
        "inliers 64 hyp x 4800 pts": lambda impl: kernels.count_inliers(
            rots, trans, k4, pts, px, 10.0, 0.1, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in backends) + "     speedup")
    for name, fn in workloads(np.random.default_rng(0)).items():
        times = {}
        for bname, impl in backends.items():
            fn(impl)
            times[bname] = min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
        row = f"{name:32s}" + "".join(f"{1e3 * t:10.1f}ms" for t in times.values())
        if "cython" in times:
            row += f"  {times['python'] / times['cython']:8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
