"""Initial-state recovery from a window of measurements (bounded least squares).

The measurement map over ``N`` steps is ``g(x0) = [C~ x[0]; ...; C~ x[N-1]]``
with the noiseless dynamics. Its Jacobian is the stacked ``C~ Phi_k`` from
:mod:`actmsense.observability`, re-linearized at every iterate. The solver is
a projected Levenberg-Marquardt method on the box ``[0, rho_m]^n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DirectNet, StateSpace, rollout_direct
from .observability import build_Jw, transition_jacobians
from .selection import SensorSelection
from .simulator import InputSchedule


class EstimationError(RuntimeError):
    pass


@dataclass
class LsqProblem:
    selection: SensorSelection
    y: np.ndarray              # (N, r) measurements, or flattened
    guess: np.ndarray
    window: int
    tol: float = 1e-10
    max_iter: int = 500

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.y.size != self.window * self.selection.r:
            raise ValueError(f"expected {self.window * self.selection.r} measurements, got {self.y.size}")


@dataclass
class LsqResult:
    x: np.ndarray
    residual: float            # ||y - g(x)||^2 at the solution
    initial_residual: float
    iterations: int
    grad_norm: float
    status: str                # converged | max-iter | stalled


def window_outputs(ss: StateSpace, x0, sched: InputSchedule, N: int, sel: SensorSelection) -> np.ndarray:
    """Noiseless stacked outputs ``g(x0)`` as a flat vector of length ``N * r``."""
    X = rollout_direct(x0, np.ascontiguousarray(sched.U[:N - 1]), DirectNet.from_config(ss.cfg))
    return X[:, sel.indices].reshape(-1)


def _projected_grad_norm(x, grad, lo, hi):
    return float(np.linalg.norm(x - np.clip(x - grad, lo, hi)))


def _solve_once(prob: LsqProblem, ss: StateSpace, sched: InputSchedule, x_start) -> LsqResult:
    lo, hi = ss.cfg.state_bounds()
    sel, N = prob.selection, prob.window
    x = np.clip(np.asarray(x_start, dtype=float), lo, hi)

    def resid(z):
        F = window_outputs(ss, z, sched, N, sel) - prob.y
        if not np.all(np.isfinite(F)):
            raise EstimationError("non-finite residuals")
        return F

    F = resid(x)
    cost = float(F @ F)
    cost0 = cost
    lam = 1e-3
    status = "max-iter"
    it = 0
    gnorm = np.inf
    for it in range(1, prob.max_iter + 1):
        J = build_Jw(sel, transition_jacobians(ss, x, sched, N))
        grad = J.T @ F
        gnorm = _projected_grad_norm(x, grad, lo, hi)
        if gnorm <= prob.tol:
            status = "converged"
            it -= 1
            break
        # variables held at a bound by the gradient stay fixed for this step
        held = ((x <= lo) & (grad > 0)) | ((x >= hi) & (grad < 0))
        free = ~held
        H = J[:, free].T @ J[:, free]
        g_free = grad[free]
        improved = False
        for _ in range(30):
            A = H + lam * (np.diag(np.diag(H)) + 1e-12 * np.eye(H.shape[0]))
            try:
                step = np.linalg.solve(A, -g_free)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = x.copy()
            cand[free] += step
            cand = np.clip(cand, lo, hi)
            Fc = resid(cand)
            cc = float(Fc @ Fc)
            if cc < cost:
                x, F = cand, Fc
                rel = (cost - cc) / max(cost, 1e-300)
                cost = cc
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        if not improved:
            status = "stalled"
            break
        if cost == 0.0 or rel < 1e-15:
            gnorm = _projected_grad_norm(x, build_Jw(sel, transition_jacobians(ss, x, sched, N)).T @ F, lo, hi)
            status = "converged" if gnorm <= prob.tol or cost == 0.0 else "stalled"
            break
    return LsqResult(x=x, residual=cost, initial_residual=cost0, iterations=it,
                     grad_norm=gnorm, status=status)


def solve_p3(prob: LsqProblem, ss: StateSpace, sched: InputSchedule,
             n_starts: int = 1, seed: int = 0) -> LsqResult:
    """Bounded least squares from ``prob.guess`` plus ``n_starts - 1`` random starts."""
    if prob.window < 1:
        raise ValueError("window must be at least 1")
    lo, hi = ss.cfg.state_bounds()
    guess = np.asarray(prob.guess, dtype=float)
    if guess.shape != (ss.n,):
        raise ValueError(f"guess must have length {ss.n}")
    if np.any(guess < lo) or np.any(guess > hi):
        raise ValueError("guess must lie within the state bounds")
    starts = [guess]
    rng = np.random.default_rng(seed)
    for _ in range(n_starts - 1):
        starts.append(rng.uniform(lo, hi, ss.n))
    best = None
    for s in starts:
        res = _solve_once(prob, ss, sched, s)
        if best is None or res.residual < best.residual:
            best = res
    return best


def relative_error(x_est, x_true) -> float:
    """``||x_est - x_true|| / ||x_true||``."""
    x_true = np.asarray(x_true, dtype=float)
    d = np.linalg.norm(x_true)
    if d == 0:
        raise ZeroDivisionError("relative error undefined for a zero reference state")
    return float(np.linalg.norm(np.asarray(x_est, dtype=float) - x_true) / d)
