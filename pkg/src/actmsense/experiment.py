"""Case-study pipeline: placement, initial-state recovery, observers and baselines.

A :class:`Scenario` is read from an INI file. :func:`run_experiment` evaluates
every (metric, budget, window) cell and writes one CSV per result table plus a
manifest. CSVs contain no timings, so identical scenarios and seeds give
byte-identical files. Every row carries the scenario hash and the seed.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, HighwayConfig, dumps_config, highway_a, highway_b, load_config
from .estimation import LsqProblem, relative_error, solve_p3, window_outputs
from .model import DirectNet, StateSpace, build_state_space, rollout_direct
from .observability import SensorGramians
from .observer import (SynthesisFailed, bound_check, kalman_gain, model_mismatch_variance, rmse,
                       run_observer, synthesize)
from .placement import PlacementProblem, baseline_random, baseline_uniform, budgets, solve
from .selection import SensorSelection
from .simulator import InputSchedule, NoiseModel, Trajectory

FILES = ("fig3a_zeta.csv", "fig3b_kappa.csv", "fig5_rmse.csv", "fig8_compare.csv")

# stream tags for seed derivation
_X0, _XHAT0, _SCHED, _RANDOM, _PROC, _MEAS = range(1, 7)


class ScenarioError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip().lower() for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class Scenario:
    """Experiment definition.

    ``highway`` is ``"A"``, ``"B"`` or a path to a highway config file,
    resolved against ``base_dir``. ``obs_window`` selects the window whose
    optimal placements feed the observer stage (default: the largest window).
    """

    name: str = "scenario"
    highway: str = "A"
    k_f: int = 2000
    windows: tuple[int, ...] = (50, 100, 200)
    budget_percents: tuple[int, ...] = (20, 30, 40, 50, 60, 70, 80, 90)
    metrics: tuple[str, ...] = ("det", "trace")
    q_var: float = 1e-3
    r_var: float = 1e-3
    seed: int = 0
    random_repeats: int = 10
    noise_runs: int = 1
    random_baseline: bool = True
    uniform_baseline: bool = True
    observer: bool = True
    obs_window: int | None = None
    fallback: str = "kalman"
    n_starts: int = 1
    dwell: int = 100
    bnb_tol: float = 1e-8
    workers: int = 1
    base_dir: str = "."

    def __post_init__(self):
        if self.k_f < 1:
            raise ScenarioError("k_f must be positive")
        for m in self.metrics:
            if m not in ("det", "trace"):
                raise ScenarioError(f"unknown metric {m!r}")
        for N in self.windows:
            if not 1 <= N <= self.k_f + 1:
                raise ScenarioError(f"window {N} outside 1..k_f+1")
        for pct in self.budget_percents:
            if not 0 < pct <= 100:
                raise ScenarioError(f"budget percent {pct} outside (0, 100]")
        if self.fallback not in ("kalman", "none"):
            raise ScenarioError("fallback must be 'kalman' or 'none'")
        if self.seed < 0:
            raise ScenarioError("seed must be non-negative")
        if self.obs_window is not None and self.obs_window not in self.windows:
            raise ScenarioError("observer window must be one of the windows")
        if self.random_repeats < 1 or self.noise_runs < 1:
            raise ScenarioError("random_repeats and noise_runs must be positive")

    @property
    def observer_window(self) -> int | None:
        if self.obs_window is not None:
            return self.obs_window
        return max(self.windows) if self.windows else None

    def with_seed(self, seed: int) -> "Scenario":
        return Scenario(**{**asdict(self), "seed": int(seed)})

    def highway_config(self) -> HighwayConfig:
        key = self.highway.strip()
        if key.upper() == "A":
            return highway_a()
        if key.upper() == "B":
            return highway_b()
        path = Path(key)
        if not path.is_absolute():
            path = Path(self.base_dir) / path
        if not path.exists():
            raise ScenarioError(f"highway config {path} not found")
        return load_config(path)

    def digest(self) -> str:
        """Hash of every result-relevant field and the resolved highway."""
        d = asdict(self)
        for k in ("seed", "workers", "base_dir", "highway"):
            d.pop(k)
        text = json.dumps(d, sort_keys=True) + "\n" + dumps_config(self.highway_config())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def load_scenario(path) -> Scenario:
    """Parse an INI scenario file; see the README for the keys."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise ScenarioError(f"cannot read scenario file {path}")
    if not cp.has_section("scenario"):
        raise ScenarioError(f"{path}: missing [scenario] section")
    s = cp["scenario"]
    kw: dict = {"base_dir": str(path.parent)}
    try:
        for key in ("name", "highway", "fallback"):
            if key in s:
                kw[key] = s[key].strip().strip('"')
        for key in ("k_f", "seed", "random_repeats", "noise_runs", "n_starts", "dwell", "workers"):
            if key in s:
                kw[key] = s.getint(key)
        for key in ("q_var", "r_var", "bnb_tol"):
            if key in s:
                kw[key] = s.getfloat(key)
        for key in ("random_baseline", "uniform_baseline", "observer"):
            if key in s:
                kw[key] = s.getboolean(key)
        if "windows" in s:
            kw["windows"] = _ints(s["windows"])
        if "budgets" in s:
            kw["budget_percents"] = _ints(s["budgets"])
        if "metrics" in s:
            kw["metrics"] = _words(s["metrics"])
        if "obs_window" in s:
            kw["obs_window"] = s.getint("obs_window")
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    sc = Scenario(**kw)
    try:
        sc.highway_config()
    except ConfigError as exc:
        raise ScenarioError(str(exc)) from exc
    return sc


# -- seeded draws ------------------------------------------------------------------

def derived_seed(seed: int, *tags: int) -> int:
    """Independent 63-bit seed for a tagged random stream."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, np.uint64)[0]) >> 1


def random_state(cfg: HighwayConfig, seed: int, tag: int) -> np.ndarray:
    """Uniform draw in ``(0, rho_m]^n``."""
    u = np.random.default_rng(derived_seed(seed, tag)).uniform(size=cfg.n)
    return cfg.diagram.rho_m * (1.0 - u)


@dataclass
class Setup:
    cfg: HighwayConfig
    ss: StateSpace
    x0: np.ndarray
    x_hat0: np.ndarray
    sched: InputSchedule


def make_setup(sc: Scenario) -> Setup:
    cfg = sc.highway_config()
    return Setup(cfg=cfg, ss=build_state_space(cfg), x0=random_state(cfg, sc.seed, _X0),
                 x_hat0=random_state(cfg, sc.seed, _XHAT0),
                 sched=InputSchedule.random(cfg, sc.k_f, derived_seed(sc.seed, _SCHED), dwell=sc.dwell))


# -- cells -------------------------------------------------------------------------

@dataclass
class PlacementCell:
    metric: str
    window: int
    percent: int
    r: int
    status: str = "ok"
    segments: list = field(default_factory=list)
    objective: float = float("nan")
    nodes: int = 0
    solver_status: str = ""
    zeta: float = float("nan")
    residual: float = float("nan")
    iterations: int = 0
    lsq_status: str = ""
    seconds: float = 0.0


def _placement_task(args) -> list[PlacementCell]:
    """All budgets for one (metric, window); pure, so it can run in a worker."""
    sc, metric, N = args
    st = make_setup(sc)
    sel_p = st.cfg.n
    out = []
    try:
        gr = SensorGramians.compute(st.ss, st.x_hat0, st.sched, N)
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        return [PlacementCell(metric, N, pct, r, status=f"failed: gramian: {exc}")
                for pct, r in zip(sc.budget_percents, budgets(sel_p, sc.budget_percents))]
    for pct, r in zip(sc.budget_percents, budgets(sel_p, sc.budget_percents)):
        cell = PlacementCell(metric, N, pct, r)
        t0 = time.perf_counter()
        try:
            kw = {"tol": sc.bnb_tol} if metric == "det" else {}
            res = solve(PlacementProblem(gr, r, metric), **kw)
            cell.segments = res.selection.segments
            cell.objective = res.value
            cell.nodes = res.node_count
            cell.solver_status = res.status
            y = window_outputs(st.ss, st.x0, st.sched, N, res.selection)
            lsq = solve_p3(LsqProblem(res.selection, y, st.x_hat0, N), st.ss, st.sched,
                           n_starts=sc.n_starts, seed=derived_seed(sc.seed, 7, r, N))
            cell.zeta = relative_error(lsq.x, st.x0)
            cell.residual = lsq.residual
            cell.iterations = lsq.iterations
            cell.lsq_status = lsq.status
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            cell.status = f"failed: {type(exc).__name__}: {exc}"
        cell.seconds = time.perf_counter() - t0
        out.append(cell)
    return out


@dataclass
class NoiseRealization:
    states: np.ndarray      # (k_f + 1, n)
    proc: np.ndarray        # (k_f, m)
    meas: np.ndarray        # (k_f, n), one noise channel per segment


def noise_realization(sc: Scenario, st: Setup, j: int) -> NoiseRealization:
    """Disturbed truth shared by every placement; sensors read their own channel."""
    m, n = st.cfg.m, st.cfg.n
    proc = np.sqrt(sc.q_var) * np.random.default_rng(derived_seed(sc.seed, _PROC, j)).standard_normal((sc.k_f, m))
    meas = np.sqrt(sc.r_var) * np.random.default_rng(derived_seed(sc.seed, _MEAS, j)).standard_normal((sc.k_f, n))
    X = rollout_direct(st.x0, np.ascontiguousarray(st.sched.U), DirectNet.from_config(st.cfg),
                       proc @ st.ss.B_u.T)
    return NoiseRealization(states=X, proc=proc, meas=meas)


def trajectory_for(real: NoiseRealization, st: Setup, sel: SensorSelection) -> Trajectory:
    idx = sel.indices
    y = real.states[:-1, idx] + real.meas[:, idx]
    return Trajectory(states=real.states, inputs=st.sched.U, measurements=y,
                      disturbances=np.hstack([real.proc, real.meas[:, idx]]), selection=sel)


@dataclass
class GainResult:
    L: np.ndarray | None
    source: str               # certificate | kalman-fallback | none
    synthesis_status: str
    mu: float = float("nan")


def observer_gain(sc: Scenario, st: Setup, sel: SensorSelection) -> GainResult:
    noise = NoiseModel.standard(st.ss, sel, q_var=sc.q_var, r_var=sc.r_var)
    try:
        syn = synthesize(st.ss, sel, noise)
        return GainResult(syn.L, "certificate", syn.status, syn.mu)
    except SynthesisFailed as exc:
        status = "synthesis-failed"
        detail = exc.attempts[-1].get("status", "") if exc.attempts else ""
        if detail:
            status += f" ({detail})"
    if sc.fallback == "kalman":
        return GainResult(kalman_gain(st.ss, sel, noise, model_mismatch_variance(st.cfg)),
                          "kalman-fallback", status)
    return GainResult(None, "none", status)


@dataclass
class RmseStats:
    value: float            # mean over noise runs
    bound_holds: str        # yes | no | n/a


def placement_rmse(sc: Scenario, st: Setup, sel: SensorSelection, gain: GainResult,
                   reals: list[NoiseRealization]) -> RmseStats:
    if gain.L is None:
        return RmseStats(float("nan"), "n/a")
    vals, holds = [], []
    for real in reals:
        traj = trajectory_for(real, st, sel)
        run = run_observer(gain.L, traj, sel, st.cfg, st.x_hat0)
        vals.append(rmse(run.errors))
        if gain.source == "certificate":
            holds.append(bound_check(run, gain.mu, traj.disturbances)[0])
    flag = ("yes" if all(holds) else "no") if holds else "n/a"
    return RmseStats(float(np.mean(vals)), flag)


# -- output ------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{float(v):.12g}"
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return str(v)


class ResultSink:
    """Collects rows per table; files are written once, in a fixed order."""

    HEADERS = {
        "fig3a_zeta.csv": ["scenario_hash", "seed", "metric", "window", "budget_percent", "r",
                           "zeta", "residual", "iterations", "lsq_status", "cell_status"],
        "fig3b_kappa.csv": ["scenario_hash", "seed", "metric", "window", "budget_percent", "r",
                            "objective", "segments", "nodes", "solver_status", "cell_status"],
        "fig5_rmse.csv": ["scenario_hash", "seed", "metric", "window", "budget_percent", "r",
                          "rmse", "gain_source", "synthesis_status", "mu", "bound_holds",
                          "segments", "cell_status"],
        "fig8_compare.csv": ["scenario_hash", "seed", "metric", "window", "budget_percent", "r",
                             "rmse_optimal", "rmse_random_mean", "rmse_random_std", "rmse_uniform",
                             "optimal_le_random", "optimal_le_uniform", "gain_source", "cell_status"],
    }

    def __init__(self, digest: str, seed: int):
        self.digest, self.seed = digest, seed
        self.rows = {name: [] for name in self.HEADERS}

    def add(self, name: str, *values) -> None:
        row = [self.digest, str(self.seed)] + [_fmt(v) for v in values]
        if len(row) != len(self.HEADERS[name]):
            raise ValueError(f"{name}: row has {len(row)} fields")
        self.rows[name].append(row)

    def write(self, out_dir: Path) -> None:
        for name, header in self.HEADERS.items():
            with open(out_dir / name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(self.rows[name])


@dataclass
class ExperimentResult:
    out_dir: Path
    digest: str
    failures: list
    manifest: dict

    @property
    def ok(self) -> bool:
        return not self.failures


def _yes(flag: bool) -> str:
    return "yes" if flag else "no"


def run_experiment(sc: Scenario, out_dir) -> ExperimentResult:
    """Run every cell of ``sc`` and write the result tables into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    digest = sc.digest()
    st = make_setup(sc)
    p = st.cfg.n
    rs = budgets(p, sc.budget_percents)
    sink = ResultSink(digest, sc.seed)
    failures: list[str] = []
    timings: dict[str, float] = {}

    # placement and initial-state recovery
    tasks = [(sc, metric, N) for metric in sc.metrics for N in sc.windows]
    if sc.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=sc.workers) as pool:
            groups = list(pool.map(_placement_task, tasks))
    else:
        groups = [_placement_task(t) for t in tasks]
    cells = {(c.metric, c.window, c.r): c for g in groups for c in g}
    for (metric, N), group in zip([(t[1], t[2]) for t in tasks], groups):
        for c in group:
            key = f"{metric}/N={N}/r={c.r}"
            timings[f"placement:{key}"] = round(c.seconds, 3)
            if c.status != "ok":
                failures.append(f"placement {key}: {c.status}")
            sink.add("fig3a_zeta.csv", metric, N, c.percent, c.r, c.zeta, c.residual,
                     c.iterations, c.lsq_status, c.status)
            sink.add("fig3b_kappa.csv", metric, N, c.percent, c.r, c.objective, c.segments,
                     c.nodes, c.solver_status, c.status)

    # observers and baselines at the observer window
    Nobs = sc.observer_window
    if sc.observer and Nobs is not None and rs:
        t0 = time.perf_counter()
        reals = [noise_realization(sc, st, j) for j in range(sc.noise_runs)]
        base_cache: dict[int, tuple] = {}
        for r, pct in zip(rs, sc.budget_percents):
            if r in base_cache:
                continue
            rand_vals, uni_val = [], float("nan")
            try:
                if sc.random_baseline:
                    for j in range(sc.random_repeats):
                        sel = baseline_random(p, r, derived_seed(sc.seed, _RANDOM, r, j))
                        rand_vals.append(placement_rmse(sc, st, sel, observer_gain(sc, st, sel), reals).value)
                if sc.uniform_baseline:
                    sel = baseline_uniform(p, r)
                    uni_val = placement_rmse(sc, st, sel, observer_gain(sc, st, sel), reals).value
                base_cache[r] = (rand_vals, uni_val, "ok")
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                base_cache[r] = ([], float("nan"), f"failed: {type(exc).__name__}: {exc}")
        for metric in sc.metrics:
            for r, pct in zip(rs, sc.budget_percents):
                key = f"{metric}/N={Nobs}/r={r}"
                c = cells[(metric, Nobs, r)]
                status, gain, stats = c.status, None, RmseStats(float("nan"), "n/a")
                if status == "ok":
                    try:
                        sel = SensorSelection.from_indices(p, [s - 1 for s in c.segments])
                        gain = observer_gain(sc, st, sel)
                        stats = placement_rmse(sc, st, sel, gain, reals)
                        if gain.source != "certificate":
                            status = gain.synthesis_status
                    except Exception as exc:  # noqa: BLE001 - recorded per cell
                        status = f"failed: {type(exc).__name__}: {exc}"
                if status != "ok":
                    failures.append(f"observer {key}: {status}")
                g_src = gain.source if gain else "none"
                g_stat = gain.synthesis_status if gain else ""
                g_mu = gain.mu if gain else float("nan")
                sink.add("fig5_rmse.csv", metric, Nobs, pct, r, stats.value, g_src, g_stat, g_mu,
                         stats.bound_holds, c.segments, status)
                rand_vals, uni_val, b_status = base_cache[r]
                if b_status != "ok":
                    failures.append(f"baseline r={r}: {b_status}")
                r_mean = float(np.mean(rand_vals)) if rand_vals else float("nan")
                r_std = float(np.std(rand_vals)) if rand_vals else float("nan")
                le_r = _yes(stats.value <= r_mean) if rand_vals and np.isfinite(stats.value) else "n/a"
                le_u = _yes(stats.value <= uni_val) if np.isfinite(uni_val) and np.isfinite(stats.value) else "n/a"
                cell_status = status if b_status == "ok" else b_status
                sink.add("fig8_compare.csv", metric, Nobs, pct, r, stats.value, r_mean, r_std, uni_val,
                         le_r, le_u, g_src, cell_status)
        timings["observer_stage"] = round(time.perf_counter() - t0, 3)

    sink.write(out_dir)
    manifest = {
        "scenario": sc.name,
        "scenario_hash": digest,
        "seed": sc.seed,
        "highway": sc.highway,
        "n": p,
        "budgets": rs,
        "files": list(FILES),
        "cells_failed": len(failures),
        "failures": failures,
        "wall_seconds": round(time.perf_counter() - t_start, 3),
        "timings": timings,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ExperimentResult(out_dir, digest, failures, manifest)


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = ["Scenario", "ScenarioError", "load_scenario", "run_experiment", "ExperimentResult",
           "make_setup", "random_state", "derived_seed", "noise_realization", "trajectory_for",
           "observer_gain", "placement_rmse", "read_table", "FILES"]
