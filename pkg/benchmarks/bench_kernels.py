"""Time the compiled and pure-Python kernels on the bundled elliptic runs.

    python benchmarks/bench_kernels.py --steps 5000 --repeat 3
"""
import argparse
import time

import numpy as np

from consode import _core
from consode.config import load_config
from consode.integrators import integrate


def best_time(cfg, backend, steps, repeat):
    best, traj = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        traj = integrate(cfg.system, cfg.spec, cfg.x0, steps, r_div=cfg.r_div, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, traj


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--methods", nargs="+",
                    default=["conservative", "backward_euler", "midpoint", "euler", "verlet"])
    args = ap.parse_args(argv)

    backends = _core.available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'method':<16}{'steps':>8}" + "".join(f"{b + ' [s]':>14}" for b in backends)
          + f"{'speedup':>10}{'identical':>11}")
    for name in args.methods:
        cfg = load_config(f"elliptic_{name}.cfg")
        results = {b: best_time(cfg, b, args.steps, args.repeat) for b in backends}
        trajs = [t for _, t in results.values()]
        same = all(np.array_equal(trajs[0].states, t.states) for t in trajs[1:])
        times = [results[b][0] for b in backends]
        speed = f"{times[-1] / times[0]:.1f}x" if len(times) > 1 and times[0] > 0 else "-"
        print(f"{name:<16}{trajs[0].n_steps:>8}" + "".join(f"{t:>14.4f}" for t in times)
              + f"{speed:>10}{str(same):>11}")


if __name__ == "__main__":
    main()
