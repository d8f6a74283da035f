"""Compare the compiled and pure-Python kernels on Highway A.

Run ``python benchmarks/bench_kernels.py [--repeat 5]``. Reports the best
wall time per kernel and backend, the speedup, and the largest difference
between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from actmsense import backend
from actmsense.config import highway_a
from actmsense.model import DirectNet, build_state_space
from actmsense.simulator import InputSchedule


def _best(fn, repeat: int) -> tuple[float, object]:
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(k_f: int, n_points: int):
    cfg = highway_a()
    ss = build_state_space(cfg)
    net = DirectNet.from_config(cfg)
    rng = np.random.default_rng(0)
    lo, hi = cfg.state_bounds()
    X = rng.uniform(lo, hi, (n_points, cfg.n))
    ulo, uhi = cfg.input_bounds()
    U = rng.uniform(ulo, uhi, (n_points, cfg.m))
    sched = InputSchedule.random(cfg, k_f, seed=1)
    x0 = rng.uniform(lo, hi, cfg.n)
    indptr, idx, val = ss.w_csr()

    def steps(mod):
        return lambda: np.array([mod.direct_step(net, X[i], U[i]) for i in range(n_points)])

    def rollout(mod):
        return lambda: mod.direct_rollout(net, x0, np.ascontiguousarray(sched.U))

    def atoms(mod):
        return lambda: np.array([mod.atoms_eval(ss.program, X[i], U[i]) for i in range(n_points)])

    def jacobians(mod):
        return lambda: mod.step_jacobians(ss.program, ss.A, indptr, idx, val, X, U)

    return {"direct_step": steps, "direct_rollout": rollout, "atoms_eval": atoms,
            "step_jacobians": jacobians}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--k-f", type=int, default=2000)
    ap.add_argument("--points", type=int, default=2000)
    a = ap.parse_args(argv)
    mods = backend.available()
    if "compiled" not in mods:
        print("compiled backend not built; timing the Python kernels only")
    print(f"{'kernel':<16} {'python [s]':>11} {'compiled [s]':>13} {'speedup':>8} {'max diff':>10}")
    for name, make in cases(a.k_f, a.points).items():
        t_py, out_py = _best(make(mods["python"]), a.repeat)
        if "compiled" in mods:
            t_c, out_c = _best(make(mods["compiled"]), a.repeat)
            diff = float(np.max(np.abs(np.asarray(out_py) - np.asarray(out_c))))
            print(f"{name:<16} {t_py:>11.4f} {t_c:>13.4f} {t_py / t_c:>7.1f}x {diff:>10.2e}")
        else:
            print(f"{name:<16} {t_py:>11.4f} {'-':>13} {'-':>8} {'-':>10}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
