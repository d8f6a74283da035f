"""Trajectory rollouts with optional process and measurement noise."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .config import HighwayConfig
from .model import DirectNet, StateSpace, rollout_direct, step_compact
from .selection import SensorSelection


@dataclass(frozen=True)
class InputSchedule:
    """Inputs ``u[0..k_f-1]`` as a ``(k_f, m)`` array."""

    U: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        if U.ndim != 2:
            raise ValueError("schedule must be a (k_f, m) array")
        U.setflags(write=False)
        object.__setattr__(self, "U", U)

    @property
    def k_f(self) -> int:
        return self.U.shape[0]

    def check(self, cfg: HighwayConfig, tol: float = 1e-12) -> None:
        lo, hi = cfg.input_bounds()
        if self.U.shape[1] != cfg.m:
            raise ValueError(f"schedule has {self.U.shape[1]} inputs, expected {cfg.m}")
        if self.U.size and (self.U.min() < lo - tol or self.U.max() > hi + tol):
            raise ValueError("schedule leaves the admissible input set")

    def head(self, k: int) -> "InputSchedule":
        if k > self.k_f:
            raise ValueError(f"schedule has only {self.k_f} steps, {k} requested")
        return InputSchedule(self.U[:k])

    @classmethod
    def constant(cls, u, k_f: int) -> "InputSchedule":
        return cls(np.tile(np.asarray(u, dtype=float), (k_f, 1)))

    @classmethod
    def piecewise(cls, values, dwell: int) -> "InputSchedule":
        """Each row of ``values`` held for ``dwell`` steps."""
        return cls(np.repeat(np.asarray(values, dtype=float), dwell, axis=0))

    @classmethod
    def random(cls, cfg: HighwayConfig, k_f: int, seed: int, dwell: int = 100,
               low: float = 0.0, high: float = 1.0) -> "InputSchedule":
        """Seeded uniform draws in ``[low, high] * capacity`` held for ``dwell`` steps."""
        if not 0 <= low <= high <= 1:
            raise ValueError("need 0 <= low <= high <= 1")
        rng = np.random.default_rng(seed)
        cap = cfg.diagram.capacity
        n_blocks = -(-k_f // dwell)
        vals = rng.uniform(low * cap, high * cap, size=(n_blocks, cfg.m))
        return cls(np.repeat(vals, dwell, axis=0)[:k_f])


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian unknown inputs ``w ~ N(0, blkdiag(Q, R))`` and their channels."""

    B_w: np.ndarray
    D_w: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    seed: int = 0

    def __post_init__(self):
        q = self.B_w.shape[1]
        if self.D_w.shape[1] != q:
            raise ValueError("B_w and D_w need the same number of columns")
        cov = self.covariance
        if cov.shape != (q, q):
            raise ValueError(f"covariance must be {q}x{q}")
        if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-12:
            raise ValueError("covariance must be positive semi-definite")

    @property
    def q(self) -> int:
        return self.B_w.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        Q, R = np.atleast_2d(self.Q), np.atleast_2d(self.R)
        out = np.zeros((Q.shape[0] + R.shape[0],) * 2)
        out[:Q.shape[0], :Q.shape[0]] = Q
        out[Q.shape[0]:, Q.shape[0]:] = R
        return out

    def sample(self, k_f: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        vals, vecs = np.linalg.eigh(self.covariance)
        L = vecs * np.sqrt(np.clip(vals, 0.0, None))
        return rng.standard_normal((k_f, self.q)) @ L.T

    @classmethod
    def standard(cls, ss: StateSpace, sel: SensorSelection, q_var: float = 1e-3,
                 r_var: float | None = None, seed: int = 0) -> "NoiseModel":
        """``B_w = [B_u | O]``, ``D_w = [O | I]``, ``Q = q_var I``, ``R = r_var I``."""
        r_var = q_var if r_var is None else r_var
        m, p = ss.m, sel.r
        B_w = np.hstack([ss.B_u, np.zeros((ss.n, p))])
        D_w = np.hstack([np.zeros((p, m)), np.eye(p)])
        return cls(B_w=B_w, D_w=D_w, Q=q_var * np.eye(m), R=r_var * np.eye(p), seed=seed)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray            # (k_f + 1, n)
    inputs: np.ndarray            # (k_f, m)
    measurements: np.ndarray      # (k_f, p~)
    disturbances: np.ndarray      # (k_f, q), zeros when noiseless
    selection: SensorSelection

    @property
    def k_f(self) -> int:
        return self.inputs.shape[0]


def _clean(X: np.ndarray) -> np.ndarray:
    # round-off negatives only; genuine negatives (noise) are left alone
    X[(X < 0) & (X > -1e-12)] = 0.0
    return X


def rollout(x0, sched: InputSchedule, k_f: int, cfg: HighwayConfig,
            noise: NoiseModel | None = None, selection: SensorSelection | None = None,
            ss: StateSpace | None = None, method: str = "direct") -> Trajectory:
    """Simulate ``x[k+1] = step(x[k], u[k]) + B_w w[k]`` for ``k < k_f``.

    ``method='direct'`` uses the min-form kernel, ``'compact'`` the state-space
    form; both give the same states to round-off.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (cfg.n,):
        raise ValueError(f"x0 must have length {cfg.n}")
    sched.check(cfg)
    U = sched.head(k_f).U
    selection = SensorSelection.full(cfg.n) if selection is None else selection
    if selection.p != cfg.n:
        raise ValueError("selection size must equal the state dimension")
    if noise is None:
        w = np.zeros((k_f, 0))
        add = None
    else:
        if noise.B_w.shape[0] != cfg.n or noise.D_w.shape[0] != selection.r:
            raise ValueError("noise channels do not match state/output dimensions")
        w = noise.sample(k_f)
        add = w @ noise.B_w.T
    if method == "direct":
        X = rollout_direct(x0, U, DirectNet.from_config(cfg), add)
    elif method == "compact":
        from .model import build_state_space
        ss = ss or build_state_space(cfg)
        X = np.empty((k_f + 1, cfg.n))
        X[0] = x0
        for k in range(k_f):
            X[k + 1] = step_compact(ss, X[k], U[k]) + (add[k] if add is not None else 0.0)
    else:
        raise ValueError(f"unknown method {method!r}")
    X = _clean(X)
    Y = X[:-1, selection.indices]
    if noise is not None:
        Y = Y + w @ noise.D_w.T
    return Trajectory(states=X, inputs=U.copy(), measurements=Y,
                      disturbances=w if noise is not None else np.zeros((k_f, 0)),
                      selection=selection)


def measure(x, selection: SensorSelection, noise: NoiseModel | None = None, w=None) -> np.ndarray:
    """``C~ x`` plus ``D_w w`` when a disturbance sample is given."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != selection.p:
        raise ValueError("state length does not match selection")
    y = x[..., selection.indices]
    if noise is not None and w is not None:
        y = y + np.asarray(w) @ noise.D_w.T
    return y


def write_trajectory_csv(path, traj: Trajectory) -> None:
    """CSV with header ``k, x_1..x_n, u_1..u_m, y_1..y_p``; 12 significant digits."""
    n = traj.states.shape[1]
    m = traj.inputs.shape[1]
    p = traj.measurements.shape[1]
    fmt = lambda v: f"{v:.12g}"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k"] + [f"x_{i}" for i in range(1, n + 1)] + [f"u_{i}" for i in range(1, m + 1)]
                   + [f"y_{i}" for i in range(1, p + 1)])
        for k in range(traj.k_f + 1):
            row = [k] + [fmt(v) for v in traj.states[k]]
            if k < traj.k_f:
                row += [fmt(v) for v in traj.inputs[k]] + [fmt(v) for v in traj.measurements[k]]
            else:
                row += [""] * (m + p)
            w.writerow(row)


def read_trajectory_csv(path, n: int, m: int):
    """Return ``(states, inputs, measurements)`` from :func:`write_trajectory_csv` output."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    p = len(header) - 1 - n - m
    if p < 0:
        raise ValueError("trajectory CSV has fewer columns than n + m")
    X = np.array([[float(v) for v in r[1:1 + n]] for r in body])
    U = np.array([[float(v) for v in r[1 + n:1 + n + m]] for r in body[:-1]])
    Y = np.array([[float(v) for v in r[1 + n + m:]] for r in body[:-1]]).reshape(len(body) - 1, p)
    return X, U, Y
