"""Command-line interface: ``actmsense <subcommand> --config ... --seed ... --out ...``.

Exit codes: 0 when every requested cell succeeds, 1 when a computation fails
(for example an infeasible observer synthesis), 2 for invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, HighwayConfig, load_config
from .estimation import EstimationError, LsqProblem, relative_error, solve_p3
from .experiment import (_SCHED, _XHAT0, _X0, ScenarioError, derived_seed, load_scenario,
                         random_state, run_experiment)
from .model import DirectNet, build_state_space, step_direct
from .observability import SensorGramians, write_gramian
from .observer import (SynthesisFailed, bound_check, kalman_gain, lipschitz_constant,
                       model_mismatch_variance, run_observer, synthesize)
from .placement import PlacementError, PlacementProblem, solve
from .selection import SensorSelection, read_selection_csv, write_selection_csv
from .simulator import (InputSchedule, NoiseModel, Trajectory, read_trajectory_csv, rollout,
                        write_trajectory_csv)


class UsageError(ValueError):
    pass


def _json_dump(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_vector(path, n: int) -> np.ndarray:
    vals = np.loadtxt(path, delimiter=",", ndmin=1, dtype=float).reshape(-1)
    if vals.size != n:
        raise UsageError(f"{path}: expected {n} values, got {vals.size}")
    return vals


def _read_costs(path, p: int) -> np.ndarray:
    """One cost per segment: a single column, or ``segment_index, cost`` rows."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and r[0].strip()]
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    if rows and len(rows[0]) >= 2:
        costs = np.full(p, np.nan)
        for r in rows:
            costs[int(r[0]) - 1] = float(r[1])
    else:
        costs = np.array([float(r[0]) for r in rows])
    if costs.size != p or np.any(~np.isfinite(costs)):
        raise UsageError(f"{path}: need one finite cost for each of {p} segments")
    return costs


def _schedule(cfg: HighwayConfig, seed: int, k_f: int, dwell: int) -> InputSchedule:
    return InputSchedule.random(cfg, k_f, derived_seed(seed, _SCHED), dwell=dwell)


def _load_traj(path, cfg: HighwayConfig):
    X, U, Y = read_trajectory_csv(path, cfg.n, cfg.m)
    if X.shape[0] < 2:
        raise UsageError(f"{path}: trajectory needs at least one step")
    return X, U, Y


# -- subcommands -------------------------------------------------------------------

def cmd_build(a) -> int:
    cfg = load_config(a.config)
    ss = build_state_space(cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, M in (("A", ss.A), ("G", ss.G), ("B_u", ss.B_u)):
        np.savetxt(out / f"{name}.csv", M, delimiter=",", fmt="%.12g")
    lip = lipschitz_constant(cfg)
    _json_dump(out / "model.json", {
        "n": ss.n, "m": ss.m, "g": ss.g, "mainline": cfg.topology.N,
        "onramps": list(cfg.topology.onramps), "offramps": list(cfg.topology.offramps),
        "block_lengths": [int(b) for b in ss.block_lengths],
        "state_labels": cfg.topology.state_labels(),
        "spectral_radius_A": float(np.max(np.abs(np.linalg.eigvals(ss.A)))),
        "lipschitz": float(lip.gamma_l),
        "norm_G": float(np.linalg.norm(ss.G, 2)),
    })
    print(f"n={ss.n} m={ss.m} g={ss.g} lipschitz={lip.gamma_l:.6g} -> {out}")
    return 0


def cmd_simulate(a) -> int:
    cfg = load_config(a.config)
    ss = build_state_space(cfg)
    x0 = _read_vector(a.x0, cfg.n) if a.x0 else random_state(cfg, a.seed, _X0)
    sched = _schedule(cfg, a.seed, a.k_f, a.dwell)
    sel = read_selection_csv(a.gamma, cfg.n) if a.gamma else SensorSelection.full(cfg.n)
    noise = None
    if a.noise is not None:
        noise = NoiseModel.standard(ss, sel, q_var=a.noise, r_var=a.r_var,
                                    seed=derived_seed(a.seed, 5))
    traj = rollout(x0, sched, a.k_f, cfg, noise=noise, selection=sel, ss=ss)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(a.out, traj)
    print(f"k_f={a.k_f} sensors={sel.r} noise={'off' if noise is None else a.noise} -> {a.out}")
    return 0


def cmd_place(a) -> int:
    cfg = load_config(a.config)
    ss = build_state_space(cfg)
    if a.trajectory:
        X, U, _ = _load_traj(a.trajectory, cfg)
        anchor, sched = X[0], InputSchedule(U)
    else:
        anchor = random_state(cfg, a.seed, _XHAT0)
        sched = _schedule(cfg, a.seed, max(a.window - 1, 1), a.dwell)
    if a.window - 1 > sched.k_f:
        raise UsageError(f"window {a.window} needs {a.window - 1} inputs, have {sched.k_f}")
    gr = SensorGramians.compute(ss, anchor, sched, a.window)
    costs = _read_costs(a.costs, cfg.n) if a.costs else None
    if costs is not None and a.metric != "trace":
        raise UsageError("costs are supported with the trace metric only")
    prob = PlacementProblem(gr, a.budget, a.metric, costs=costs, weight=a.weight)
    res = solve(prob)
    contrib = gr.trace_contributions() if res.contributions is None else res.contributions
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_selection_csv(out, res.selection, contrib)
    write_gramian(out.with_name(out.stem + "_gramian.csv"), out.with_name(out.stem + "_gramian.json"),
                  gr.result(res.selection))
    print(f"{a.metric} r={a.budget} N={a.window}: segments {res.selection.segments} "
          f"objective={res.value:.6g} status={res.status}")
    return 0 if res.status == "optimal" else 1


def cmd_estimate_init(a) -> int:
    cfg = load_config(a.config)
    ss = build_state_space(cfg)
    sel = read_selection_csv(a.gamma, cfg.n)
    X, U, Y = _load_traj(a.truth, cfg)
    N = a.window
    if N > X.shape[0] - 1 or N < 1:
        raise UsageError(f"window {N} outside 1..{X.shape[0] - 1}")
    if a.source == "states":
        y = X[:N, sel.indices]
    else:
        y = Y[:N][:, sel.indices] if Y.shape[1] == cfg.n else Y[:N]
        if y.shape[1] != sel.r:
            raise UsageError("trajectory measurements do not match the selection")
    guess = _read_vector(a.guess, cfg.n) if a.guess else random_state(cfg, a.seed, _XHAT0)
    res = solve_p3(LsqProblem(sel, y, guess, N), ss, InputSchedule(U), n_starts=a.starts,
                   seed=derived_seed(a.seed, 7))
    zeta = relative_error(res.x, X[0])
    _json_dump(a.out, {
        "x0_estimate": res.x.tolist(), "x0_true": X[0].tolist(), "zeta": zeta,
        "iterations": res.iterations, "residual": res.residual,
        "initial_residual": res.initial_residual, "grad_norm": res.grad_norm,
        "status": res.status, "window": N, "segments": sel.segments, "seed": a.seed,
    })
    print(f"zeta={zeta:.3e} residual={res.residual:.3e} iterations={res.iterations} status={res.status}")
    return 0 if res.status == "converged" else 1


def _recover_disturbances(X, U, Y, sel, cfg, B_u):
    """Process noise from the state increments, measurement noise from ``y - C~ x``."""
    net = DirectNet.from_config(cfg)
    pred = np.array([step_direct(X[k], U[k], net) for k in range(U.shape[0])])
    proc = np.linalg.lstsq(B_u, (X[1:] - pred).T, rcond=None)[0].T
    meas = Y - X[:-1, sel.indices]
    return np.hstack([proc, meas])


def cmd_observe(a) -> int:
    cfg = load_config(a.config)
    ss = build_state_space(cfg)
    sel = read_selection_csv(a.gamma, cfg.n)
    X, U, Y = _load_traj(a.trajectory, cfg)
    if Y.shape[1] == cfg.n and sel.r != cfg.n:
        Y = Y[:, sel.indices]
    if Y.shape[1] != sel.r:
        raise UsageError("trajectory measurements do not match the selection")
    noise = NoiseModel.standard(ss, sel, q_var=a.q_var, r_var=a.r_var)
    summary: dict = {"segments": sel.segments, "seed": a.seed}
    code = 0
    try:
        syn = synthesize(ss, sel, noise)
        L, mu = syn.L, syn.mu
        summary.update(syn.summary())
        summary["gain_source"] = "certificate"
        summary["attempts"] = syn.attempts
    except SynthesisFailed as exc:
        code = 1
        summary.update({"status": "synthesis-failed", "message": str(exc), "attempts": exc.attempts})
        if a.fallback != "kalman":
            _json_dump(Path(a.out).with_suffix(".json"), summary)
            print(f"synthesis failed: {exc}", file=sys.stderr)
            return code
        L, mu = kalman_gain(ss, sel, noise, model_mismatch_variance(cfg)), None
        summary["gain_source"] = "kalman-fallback"
    w = _recover_disturbances(X, U, Y, sel, cfg, ss.B_u)
    traj = Trajectory(states=X, inputs=U, measurements=Y, disturbances=w, selection=sel)
    x_hat0 = _read_vector(a.x_hat0, cfg.n) if a.x_hat0 else random_state(cfg, a.seed, _XHAT0)
    run = run_observer(L, traj, sel, cfg, x_hat0)
    if mu is not None:
        holds, peak, level = bound_check(run, mu, w)
        summary.update({"bound_holds": bool(holds), "post_transient_peak_z": peak, "bound": level})
        code = code if holds else 1
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["k", "e_norm", "z_norm"])
        for k, (e, z) in enumerate(zip(run.error_norms, run.z_norms)):
            wr.writerow([k, f"{e:.12g}", f"{z:.12g}"])
    _json_dump(out.with_suffix(".json"), summary)
    print(f"gain={summary['gain_source']} final |e|={run.error_norms[-1]:.3e} -> {out}")
    return code


def cmd_experiment(a) -> int:
    sc = load_scenario(a.config)
    if a.seed is not None:
        sc = sc.with_seed(a.seed)
    res = run_experiment(sc, a.out)
    for f in res.failures:
        print(f"FAILED {f}", file=sys.stderr)
    print(f"scenario {sc.name} hash={res.digest} seed={sc.seed}: "
          f"{len(res.failures)} failed cells -> {res.out_dir}")
    return 0 if res.ok else 1


# -- parser ------------------------------------------------------------------------

def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="actmsense", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help, seed_default=0):
        p.add_argument("--config", required=True, help="highway config (INI)")
        p.add_argument("--seed", type=_u64, default=seed_default, help="random seed (u64)")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("build", help="assemble the state-space matrices")
    common(p, "output directory")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("simulate", help="simulate a trajectory")
    common(p, "trajectory CSV")
    p.add_argument("--k-f", type=int, default=2000)
    p.add_argument("--dwell", type=int, default=100)
    p.add_argument("--x0", help="initial state CSV (default: seeded draw)")
    p.add_argument("--gamma", help="selection CSV for the measurements (default: all segments)")
    p.add_argument("--noise", type=float, help="process noise variance (enables noise)")
    p.add_argument("--r-var", type=float, help="measurement noise variance (default: --noise)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("place", help="optimal sensor placement")
    common(p, "selection CSV")
    p.add_argument("--metric", choices=("trace", "det"), required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--costs", help="per-segment cost CSV (trace metric)")
    p.add_argument("--weight", type=float, default=0.0)
    p.add_argument("--trajectory", help="take anchor state and inputs from this trajectory")
    p.add_argument("--dwell", type=int, default=100)
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("estimate-init", help="recover the initial state from a window")
    common(p, "result JSON")
    p.add_argument("--gamma", required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--truth", required=True, help="trajectory CSV holding the true states")
    p.add_argument("--source", choices=("states", "measurements"), default="states")
    p.add_argument("--guess", help="initial guess CSV (default: seeded draw)")
    p.add_argument("--starts", type=int, default=1)
    p.set_defaults(func=cmd_estimate_init)

    p = sub.add_parser("observe", help="synthesize an observer and run it on a trajectory")
    common(p, "per-step error CSV (summary goes next to it as JSON)")
    p.add_argument("--gamma", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--q-var", type=float, default=1e-3)
    p.add_argument("--r-var", type=float, default=None)
    p.add_argument("--x-hat0", help="observer initial state CSV (default: seeded draw)")
    p.add_argument("--fallback", choices=("none", "kalman"), default="none",
                   help="gain to run when synthesis fails (the exit code stays 1)")
    p.set_defaults(func=cmd_observe)

    p = sub.add_parser("experiment", help="run a scenario")
    p.add_argument("--config", required=True, help="scenario file (INI)")
    p.add_argument("--seed", type=_u64, default=None, help="overrides the scenario seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        return a.func(a)
    except (UsageError, ConfigError, ScenarioError, PlacementError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
