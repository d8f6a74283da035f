"""Luenberger-type observer synthesis with an L-infinity performance level.

The synthesis LMIs are assembled exactly in their block form over the
decision variables ``P, Y, eps, mu0, mu2`` with ``alpha`` and ``mu1`` fixed,
solved with :mod:`actmsense.sdp`, and re-verified at the returned point.

A necessary condition follows from two diagonal blocks of the first LMI:
``G^T P G <= eps I`` and ``(1 - alpha) P >= eps gamma_l^2 I`` together force
``gamma_l * ||G||_2 <= sqrt(1 - alpha)``. :func:`necessary_condition` checks
it so that hopeless instances are reported without running the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import backend
from .config import HighwayConfig
from .model import DirectNet, StateSpace
from .sdp import INFEASIBLE, SdpProblem, SdpResult, Variable, solve_sdp
from .selection import SensorSelection
from .simulator import NoiseModel, Trajectory

DEFAULT_ALPHA = 0.1
ALPHA_GRID = (0.1, 0.05, 0.2, 0.4)
DEFAULT_MU1 = 1e4
DEFAULT_Z_SCALE = 0.01


class SynthesisFailed(RuntimeError):
    """Raised when no alpha in the grid yields a verified solution."""

    def __init__(self, message: str, attempts: list):
        super().__init__(message)
        self.attempts = attempts


# -- Lipschitz constant ---------------------------------------------------------

@dataclass(frozen=True)
class LipschitzCertificate:
    gamma_l: float
    coefficients: tuple[float, ...]    # per-segment gamma_i
    labels: tuple[str, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.coefficients):
            raise ValueError("per-segment coefficients must be nonnegative")


def lipschitz_constant(cfg: HighwayConfig) -> LipschitzCertificate:
    """Closed-form bound on ``||f(x, u) - f(x^, u)|| / ||x - x^||``.

    One coefficient per state: mainline segments by class (first, last,
    plain, on-ramp, off-ramp), then one per on-ramp cell and per off-ramp
    cell; the constant is ``sqrt(sum gamma_i^2)``. For a plain segment whose
    neighbours carry no ramp, the missing split or allocation term is zero.
    """
    d, t = cfg.diagram, cfg.topology
    vf, wc, l = d.v_f, d.w_c, t.l
    r2 = np.sqrt(2.0)

    def split(i):
        # (beta_bar, beta_bar / beta) of an off-ramp segment, zero otherwise
        if i in t.offramps:
            b = cfg.beta(i)
            return 1.0 - b, (1.0 - b) / b
        return 0.0, 0.0

    def alloc(i):
        return cfg.xi(i) if i in t.onramps else 0.0

    for i in t.offramps:
        if not 0 < cfg.beta(i) < 1:
            raise ValueError(f"beta_{i} must lie strictly in (0, 1)")
    for i in t.onramps:
        if not 0 < cfg.xi(i) <= wc:
            raise ValueError(f"xi_{i} must lie in (0, w_c]")

    coef, labels = [], []
    N = t.N
    for i in range(1, N + 1):
        kind = t.kind(i)
        if kind == "on":
            c = (2 + r2) / wc + 2 / vf + alloc(i) / (vf * wc) + 5
        elif kind == "off":
            bb, ratio = split(i)
            b = cfg.beta(i)
            c = (2 + bb) / wc + (2 + ratio + 1 / b) / vf + 4
        elif i == 1:
            c = (1 + r2) / wc + 1 / vf + alloc(2) / (vf * wc) + 4
        elif i == N:
            bb, ratio = split(N - 1)
            c = 2 * bb / wc + (1 + 2 * ratio) / vf + 4
        else:
            bb, ratio = split(i - 1)
            c = (1 + r2 + 2 * bb) / wc + (1 + ratio) * 2 / vf + alloc(i + 1) / (vf * wc) + 4
        coef.append(c / l)
        labels.append(f"segment_{i}:{'first' if i == 1 else 'last' if i == N else kind}")
    for j in t.onramps:
        coef.append((1 / wc + alloc(j) / (vf * wc) + 3) / l)
        labels.append(f"onramp_{j}")
    for j in t.offramps:
        bb, ratio = split(j)
        b = cfg.beta(j)
        coef.append(((1 + bb) / wc + (1 + ratio + 1 / b) / vf + 4) / l)
        labels.append(f"offramp_{j}")
    gamma = float(np.sqrt(np.sum(np.square(coef))))
    return LipschitzCertificate(gamma_l=gamma, coefficients=tuple(coef), labels=tuple(labels))


# -- LMI assembly -----------------------------------------------------------------

@dataclass
class ObserverSynthesis:
    L: np.ndarray
    P: np.ndarray
    Y: np.ndarray
    eps: float
    alpha: float
    mu0: float
    mu1: float
    mu2: float
    Z: np.ndarray
    max_eigs: np.ndarray
    status: str
    attempts: list = field(default_factory=list)

    @property
    def mu(self) -> float:
        return float(np.sqrt(max(self.mu0 * self.mu1 + self.mu2, 0.0)))

    def summary(self) -> dict:
        return {"mu": self.mu, "alpha": self.alpha, "eps": self.eps, "mu0": self.mu0,
                "mu1": self.mu1, "mu2": self.mu2, "status": self.status,
                "max_eig_13b": float(self.max_eigs[0]), "max_eig_13c": float(self.max_eigs[1])}


def p2_blocks(A, G, C, gamma_l, alpha, mu1, Z, B_w, D_w, P, Y, eps, mu0, mu2):
    """The two constraint matrices (required negative semi-definite)."""
    n, g = G.shape
    q = B_w.shape[1]
    nz = Z.shape[0]
    I_n = np.eye(n)
    PA_YC = P @ A - Y @ C
    PG = P @ G
    PBw = P @ B_w - Y @ D_w
    d1 = (alpha - 1.0) * P + eps * gamma_l ** 2 * I_n
    big = np.block([
        [d1, np.zeros((n, g)), np.zeros((n, q)), PA_YC.T],
        [np.zeros((g, n)), -eps * np.eye(g), np.zeros((g, q)), PG.T],
        [np.zeros((q, n)), np.zeros((q, g)), -alpha * mu0 * np.eye(q), PBw.T],
        [PA_YC, PG, PBw, -P],
    ])
    perf = np.block([
        [-P, np.zeros((n, q)), Z.T],
        [np.zeros((q, n)), -mu2 * np.eye(q), np.zeros((q, nz))],
        [Z, np.zeros((nz, q)), -mu1 * np.eye(nz)],
    ])
    return [big, perf]


def assemble_p2(A, G, C, gamma_l: float, alpha: float, mu1: float, Z, B_w, D_w) -> SdpProblem:
    """SDP over ``P, Y, eps, mu0, mu2`` minimizing ``mu0 * mu1 + mu2``.

    The performance block forces ``P >= Z^T Z / mu1``, so the natural size of
    every variable is ``kappa = ||Z||^2 / mu1``. The problem is posed in the
    normalized variables ``P = kappa P~`` (same for ``Y, eps, mu0, mu2``): the
    decrease block is divided by ``kappa`` and the performance block is taken
    under the congruence ``diag(kappa^-1/2 I, kappa^-1/2 I, mu1^-1/2 I)``,
    which turns ``Z`` into ``Z / ||Z||`` and ``mu1`` into 1. Both maps
    preserve the semidefinite order, so the feasible set is unchanged while
    eigenvalue tolerances apply at unit scale. :func:`denormalize` maps the
    solution back.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if mu1 <= 0:
        raise ValueError("mu1 must be positive")
    A, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, C))
    G = np.asarray(G, dtype=float).reshape(A.shape[0], -1)
    Z, B_w, D_w = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (Z, B_w, D_w))
    n = A.shape[0]
    p = C.shape[0]
    if A.shape != (n, n) or G.shape[0] != n or C.shape[1] != n or Z.shape[1] != n:
        raise ValueError("inconsistent system dimensions")
    if B_w.shape[0] != n or D_w.shape != (p, B_w.shape[1]):
        raise ValueError("inconsistent disturbance channel dimensions")
    z_norm = np.linalg.norm(Z, 2)
    kappa = z_norm ** 2 / mu1 if z_norm > 0 else 1.0
    Z_unit = Z / z_norm if z_norm > 0 else Z
    variables = [Variable("P", "sym", (n, n)), Variable("Y", "full", (n, p)),
                 Variable("eps", "scalar"), Variable("mu0", "scalar"), Variable("mu2", "scalar")]

    def blocks(v):
        return p2_blocks(A, G, C, gamma_l, alpha, 1.0, Z_unit, B_w, D_w,
                         v["P"], v["Y"], v["eps"], v["mu0"], v["mu2"])

    return SdpProblem(variables=variables, blocks=blocks,
                      objective=lambda v: v["mu0"] * mu1 + v["mu2"],
                      strict=[True, True], names=["decrease", "performance"],
                      meta=dict(A=A, G=G, C=C, gamma_l=gamma_l, alpha=alpha, mu1=mu1,
                                Z=Z, Z_unit=Z_unit, B_w=B_w, D_w=D_w, kappa=kappa))


def denormalize(prob: SdpProblem, values: dict) -> dict:
    """Solution of the normalized problem in the original variables."""
    k = prob.meta["kappa"]
    return {name: k * val for name, val in values.items()}


def necessary_condition(G, gamma_l: float, alpha: float) -> tuple[bool, float]:
    """``(holds, gamma_l * ||G||_2)``; failing it proves the LMIs infeasible."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    value = float(gamma_l * (np.linalg.norm(G, 2) if G.size else 0.0))
    if not np.any(G):
        return True, 0.0
    return value <= np.sqrt(1.0 - alpha), value


def verify(prob: SdpProblem, values: dict) -> np.ndarray:
    """Largest eigenvalue of each normalized block re-assembled at ``values``.

    ``values`` are in the original variables; see :func:`assemble_p2`.
    """
    m = prob.meta
    k = m["kappa"]
    blocks = p2_blocks(m["A"], m["G"], m["C"], m["gamma_l"], m["alpha"], 1.0, m["Z_unit"],
                       m["B_w"], m["D_w"], values["P"] / k, values["Y"] / k, values["eps"] / k,
                       values["mu0"] / k, values["mu2"] / k)
    return np.array([np.linalg.eigvalsh(0.5 * (F + F.T))[-1] for F in blocks])


def verify_unscaled(syn: "ObserverSynthesis", prob: SdpProblem) -> np.ndarray:
    """Largest eigenvalues of the blocks exactly as printed, at the returned point."""
    m = prob.meta
    blocks = p2_blocks(m["A"], m["G"], m["C"], m["gamma_l"], syn.alpha, syn.mu1, m["Z"],
                       m["B_w"], m["D_w"], syn.P, syn.Y, syn.eps, syn.mu0, syn.mu2)
    return np.array([np.linalg.eigvalsh(0.5 * (F + F.T))[-1] for F in blocks])


def _from_sdp(prob: SdpProblem, res: SdpResult) -> ObserverSynthesis | None:
    if not res.feasible:
        return None
    v = denormalize(prob, res.values)
    eigs = verify(prob, v)
    if np.any(eigs > prob.verify_tol):
        return None
    P = 0.5 * (v["P"] + v["P"].T)
    if np.linalg.eigvalsh(P)[0] <= 0:
        return None
    L = np.linalg.solve(P, v["Y"])
    m = prob.meta
    return ObserverSynthesis(L=L, P=P, Y=v["Y"], eps=v["eps"], alpha=m["alpha"], mu0=v["mu0"],
                             mu1=m["mu1"], mu2=v["mu2"], Z=m["Z"], max_eigs=eigs,
                             status=res.status)


def synthesize(ss: StateSpace, selection: SensorSelection, noise: NoiseModel,
               gamma_l: float | None = None, alphas=ALPHA_GRID, mu1: float = DEFAULT_MU1,
               Z=None, precheck: bool = True, **solver_kw) -> ObserverSynthesis:
    """Solve the synthesis LMIs over ``alphas`` in order; first verified success wins.

    With ``precheck`` an alpha that violates :func:`necessary_condition` is
    recorded as infeasible without calling the solver.
    """
    C = selection.C_reduced()
    Z = DEFAULT_Z_SCALE * np.eye(ss.n) if Z is None else np.asarray(Z, dtype=float)
    gl = lipschitz_constant(ss.cfg).gamma_l if gamma_l is None else gamma_l
    G = np.zeros((ss.n, 0)) if ss.is_linear else ss.G
    attempts = []
    for alpha in alphas:
        if precheck:
            ok, value = necessary_condition(G, gl, alpha)
            if not ok:
                attempts.append({"alpha": alpha, "status": INFEASIBLE, "reason":
                                 f"gamma_l*||G||_2 = {value:.4g} > sqrt(1-alpha) = {np.sqrt(1 - alpha):.4g}"})
                continue
        prob = assemble_p2(ss.A, G, C, gl, alpha, mu1, Z, noise.B_w, noise.D_w)
        res = solve_sdp(prob, **solver_kw)
        syn = _from_sdp(prob, res)
        attempts.append({"alpha": alpha, "status": res.status, "iterations": res.iterations,
                         "verified": syn is not None})
        if syn is not None:
            syn.attempts = attempts
            return syn
    raise SynthesisFailed(f"no feasible synthesis for alpha in {tuple(alphas)}", attempts)


def model_mismatch_variance(cfg: HighwayConfig) -> float:
    """Per-state variance standing in for the nonlinear term in the linear design.

    One capacity flow per step, ``(T * v_f * rho_c / l)^2``, bounds how far the
    neglected flux terms move a density in one step.
    """
    t = cfg.topology
    return float((t.T * cfg.diagram.capacity / t.l) ** 2)


def kalman_gain(ss: StateSpace, selection: SensorSelection, noise: NoiseModel,
                state_var: float = 0.0) -> np.ndarray:
    """Steady-state predictor gain of the linear part ``(A, C~)`` under ``noise``.

    ``state_var * I`` is added to the process covariance to account for the
    nonlinear term the linear part leaves out; see :func:`model_mismatch_variance`.
    Not a certificate for the nonlinear error dynamics; it serves as a
    fallback gain for error comparisons when the synthesis LMIs are infeasible.
    """
    if state_var < 0:
        raise ValueError("state_var must be nonnegative")
    C = selection.C_reduced()
    Bw, Dw = noise.B_w, noise.D_w
    cov = noise.covariance
    Qx = Bw @ cov @ Bw.T + state_var * np.eye(ss.n)
    Ry = Dw @ cov @ Dw.T
    Sxy = Bw @ cov @ Dw.T
    Sigma = sla.solve_discrete_are(ss.A.T, C.T, Qx, Ry, s=Sxy)
    return (ss.A @ Sigma @ C.T + Sxy) @ np.linalg.inv(C @ Sigma @ C.T + Ry)


# -- observer rollout and metrics ---------------------------------------------------

@dataclass(frozen=True)
class ObserverRun:
    estimates: np.ndarray   # (k_f + 1, n)
    errors: np.ndarray      # (k_f + 1, n), x - x_hat
    z_norms: np.ndarray     # (k_f + 1,)

    @property
    def error_norms(self) -> np.ndarray:
        return np.linalg.norm(self.errors, axis=1)


def run_observer(L, traj: Trajectory, selection: SensorSelection, cfg: HighwayConfig,
                 x_hat0, Z=None) -> ObserverRun:
    """``x^[k+1] = step(x^[k], u[k]) + L (y[k] - C~ x^[k])``."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    n = cfg.n
    if L.shape != (n, selection.r):
        raise ValueError(f"gain must be {n}x{selection.r}, got {L.shape}")
    if traj.measurements.shape[1] != selection.r:
        raise ValueError("trajectory measurements do not match the selection")
    Z = DEFAULT_Z_SCALE * np.eye(n) if Z is None else np.asarray(Z, dtype=float)
    net = DirectNet.from_config(cfg)
    idx = selection.indices
    k_f = traj.k_f
    Xh = np.empty((k_f + 1, n))
    Xh[0] = np.asarray(x_hat0, dtype=float)
    step = backend.impl.direct_step
    for k in range(k_f):
        Xh[k + 1] = step(net, Xh[k], traj.inputs[k]) + L @ (traj.measurements[k] - Xh[k, idx])
    E = traj.states - Xh
    return ObserverRun(estimates=Xh, errors=E, z_norms=np.linalg.norm(E @ Z.T, axis=1))


def rmse(errors) -> float:
    """Sum over states of per-state root-mean-square error."""
    E = np.asarray(errors, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if E.shape[0] == 0:
        raise ValueError("empty error sequence")
    return float(np.sum(np.sqrt(np.mean(E ** 2, axis=0))))


def disturbance_level(w) -> float:
    """``max_k ||w[k]||_2`` of a realized disturbance sequence."""
    w = np.asarray(w, dtype=float)
    return float(np.linalg.norm(w, axis=1).max()) if w.size else 0.0


def bound_check(run: ObserverRun, mu: float, w, tail: float = 0.25) -> tuple[bool, float, float]:
    """``(holds, max post-transient ||z||, mu * ||w||_inf)`` over the last ``tail`` fraction."""
    k0 = int(np.floor((1.0 - tail) * run.z_norms.size))
    peak = float(run.z_norms[k0:].max())
    level = mu * disturbance_level(w)
    return peak <= level, peak, level


def lyapunov_values(run: ObserverRun, P) -> np.ndarray:
    E = run.errors
    return np.einsum("ki,ij,kj->k", E, P, E)
