"""Compare the compiled and pure-numpy ray-marching kernels.

Usage: python3 benchmarks/bench_kernels.py [--size 64] [--depth 256] [--repeat 3] [--json out.json]

Times one view's forward projection and back projection on an ``N^3`` grid
(``N x N`` detector) for every available backend, checks that the backends
agree, and prints wall-clock times and the speed-up.
"""
import argparse
import json
import sys
import time

import numpy as np

from xrfield import kernels
from xrfield.geometry import GridSpec, ViewGeometry
from xrfield.projector import march_plan


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(size, depth, repeat):
    grid = GridSpec.centered((size, size, size), 3.2e-6)
    view = ViewGeometry(0.37, (size, size), 3.2e-6)
    plan = march_plan(view, grid, depth)
    vol = np.random.default_rng(0).random(grid.shape)
    vals = np.random.default_rng(1).random(size * size)
    rows, outputs = [], {}
    for name in sorted(kernels.BACKENDS):
        fwd = lambda: kernels.march_forward(vol, plan.start, plan.step, plan.weight, depth, name)  # noqa: E731
        back = lambda: kernels.march_back(grid.shape, plan.start, plan.step, plan.weight, vals,  # noqa: E731
                                          depth, name)
        outputs[name] = (fwd(), back())
        rows.append({"backend": name, "forward_s": best_time(fwd, repeat),
                     "back_s": best_time(back, repeat)})
    ref = outputs["python"]
    for name, (f, b) in outputs.items():
        assert np.allclose(f, ref[0], rtol=1e-10, atol=1e-20), f"{name} forward disagrees"
        assert np.allclose(b, ref[1], rtol=1e-10, atol=1e-20), f"{name} back projection disagrees"
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth", type=int, default=256)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--json")
    a = p.parse_args(argv)
    rows = run(a.size, a.depth, a.repeat)
    samples = a.size * a.size * a.depth
    print(f"grid {a.size}^3, {a.size * a.size} rays x {a.depth} samples = {samples:,} samples/view")
    print(f"{'backend':<8} {'forward [s]':>12} {'back [s]':>10}")
    for r in rows:
        print(f"{r['backend']:<8} {r['forward_s']:>12.4f} {r['back_s']:>10.4f}")
    by = {r["backend"]: r for r in rows}
    if "cython" in by:
        print(f"speed-up forward {by['python']['forward_s'] / by['cython']['forward_s']:.1f}x, "
              f"back {by['python']['back_s'] / by['cython']['back_s']:.1f}x")
    else:
        print("compiled extension not built; only the numpy backend was timed")
    if a.json:
        with open(a.json, "w") as f:
            json.dump({"size": a.size, "depth": a.depth, "results": rows}, f, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
