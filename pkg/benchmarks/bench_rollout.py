"""Benchmark the compiled rollout kernel against the pure-Python backend.

Usage: python benchmarks/bench_rollout.py [n_trajectories]
"""

import sys
import time

import numpy as np

from dragplan import engine
from dragplan.params import Se3Gains, VehicleParams
from dragplan.rollout import sample_waypoints
from dragplan.spline import plan_minsnap


def run(backend: str, splines, gains, params):
    t0 = time.perf_counter()
    results = []
    steps = 0
    for spline in splines:
        out = engine.run_tracking_rollout(spline, gains, params, 0.01, 1.0, 0.1,
                                          backend=backend)
        results.append(out)
        steps += len(out[3])
    return time.perf_counter() - t0, steps, results


def main() -> int:
    count = int(sys.argv[1]) if len(sys.argv) > 1 else 20
    params = VehicleParams()
    gains = Se3Gains()
    splines = [plan_minsnap(sample_waypoints(9_000 + i), avg_speed=2.0)
               for i in range(count)]

    t_py, steps, res_py = run("python", splines, gains, params)
    print(f"python   backend: {t_py:8.3f} s  ({steps / t_py:12.0f} samples/s)")
    if engine.active_backend() != "compiled":
        print("compiled backend not built; run `pip install -e .` with a C compiler")
        return 0
    t_c, steps_c, res_c = run("compiled", splines, gains, params)
    print(f"compiled backend: {t_c:8.3f} s  ({steps_c / t_c:12.0f} samples/s)")
    print(f"speedup: {t_py / t_c:.1f}x")

    worst = 0.0
    for (e1, c1, k1, s1), (e2, c2, k2, s2) in zip(res_py, res_c):
        assert k1 == k2, "crash flags disagree between backends"
        worst = max(worst,
                    abs(e1 - e2) / max(1.0, abs(e1)),
                    abs(c1 - c2) / max(1.0, abs(c1)))
    print(f"max relative deviation between backends: {worst:.3e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
