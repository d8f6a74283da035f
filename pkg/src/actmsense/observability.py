"""Jacobians of the ACTM map and the observability Gramian over a window.

The output map over a window of ``N`` steps stacks ``C~ x[k]`` for
``k = 0..N-1``. Its Jacobian with respect to ``x[0]`` is built from the
transition Jacobians ``Phi_k = d x[k] / d x[0]``, computed by the chain rule
``Phi_{k+1} = (A + G df/dx |_k) Phi_k`` along the nominal trajectory.

Because ``C = I``, row ``i`` of every ``Phi_k`` belongs to sensor ``i``
alone, so the Gramian splits into per-sensor terms
``W_o(gamma) = sum_i gamma_i W_i``. All metrics are evaluated from those.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import backend
from .model import DirectNet, StateSpace, rollout_direct
from .selection import SensorSelection
from .simulator import InputSchedule


class EmptyWindowError(ValueError):
    pass


class IndefiniteGramianError(ValueError):
    pass


def jacobian_f(x, u, ss: StateSpace) -> np.ndarray:
    """``d f / d x`` as a ``g x n`` matrix; tied ``|.|`` terms have derivative 0."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _, dA = backend.impl.atoms_jac(ss.program, x, u)
    out = np.zeros((ss.g, ss.n))
    mask = ss.f_atom >= 0
    out[mask] = ss.f_mult[mask, None] * dA[ss.f_atom[mask]]
    return out


def step_jacobian(x, u, ss: StateSpace) -> np.ndarray:
    """``A + G df/dx`` at ``(x, u)``."""
    if ss.is_linear:
        return ss.A.copy()
    x = np.asarray(x, dtype=float)[None]
    u = np.asarray(u, dtype=float)[None]
    return backend.impl.step_jacobians(ss.program, ss.A, *ss.w_csr(), x, u)[0]


def nominal_states(ss: StateSpace, x0, sched: InputSchedule, N: int) -> np.ndarray:
    """Noiseless states ``x[0..N-1]``."""
    if N > sched.k_f + 1:
        raise ValueError(f"window {N} needs at least {N - 1} scheduled inputs")
    U = np.ascontiguousarray(sched.U[:max(N - 1, 0)])
    return rollout_direct(x0, U, DirectNet.from_config(ss.cfg))


def transition_jacobians(ss: StateSpace, x0, sched: InputSchedule, N: int) -> np.ndarray:
    """``Phi_k = d x[k] / d x[0]`` for ``k = 0..N-1`` as an ``(N, n, n)`` array."""
    if N < 1:
        raise EmptyWindowError("observation window must be at least 1")
    n = ss.n
    Phi = np.empty((N, n, n))
    Phi[0] = np.eye(n)
    if N == 1:
        return Phi
    if ss.is_linear:
        for k in range(1, N):
            Phi[k] = ss.A @ Phi[k - 1]
        return Phi
    X = nominal_states(ss, x0, sched, N)
    J = backend.impl.step_jacobians(ss.program, ss.A, *ss.w_csr(), X[:-1],
                                    np.ascontiguousarray(sched.U[:N - 1]))
    for k in range(1, N):
        Phi[k] = J[k - 1] @ Phi[k - 1]
    return Phi


def build_Jw(sel: SensorSelection, Phi: np.ndarray) -> np.ndarray:
    """Stacked ``C~ Phi_k`` blocks, shape ``(N * r, n)``."""
    if Phi.shape[0] < 1:
        raise EmptyWindowError("observation window must be at least 1")
    return Phi[:, sel.indices, :].reshape(-1, Phi.shape[2])


def geomean_det(W: np.ndarray, tol: float = 1e-10) -> float:
    """n-th root of ``det(W)`` from the eigenvalues, computed in log space."""
    lam = np.linalg.eigvalsh(0.5 * (W + W.T))
    if lam.size == 0:
        return 0.0
    if lam.min() < -tol * max(1.0, lam.max()):
        raise IndefiniteGramianError(f"Gramian has eigenvalue {lam.min():.3e}")
    if lam.min() <= 0:
        return 0.0
    return float(np.exp(np.mean(np.log(lam))))


def log_det(W: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(W)
    return float(val) if sign > 0 else -np.inf


@dataclass(frozen=True)
class GramianResult:
    W_o: np.ndarray
    trace_value: float
    geomean_det: float
    window: int
    anchor: np.ndarray

    def summary(self) -> dict:
        return {"trace": self.trace_value, "geomean_det": self.geomean_det,
                "window": self.window, "n": int(self.W_o.shape[0])}


def stacked_logdet(factors: np.ndarray) -> np.ndarray:
    """``log det(F^T F)`` for stacks ``F`` of shape ``(..., rows, n)``.

    Works from the R factor of ``F`` instead of forming ``F^T F``, which
    keeps the condition number from being squared. Returns ``-inf`` for
    exactly rank-deficient stacks or stacks with fewer rows than columns.
    """
    F = np.asarray(factors, dtype=float)
    n = F.shape[-1]
    if F.shape[-2] < n:
        return np.full(F.shape[:-2], -np.inf)
    R = np.linalg.qr(F, mode="r")
    d = np.abs(np.diagonal(R, axis1=-2, axis2=-1))
    with np.errstate(divide="ignore"):
        return 2.0 * np.log(d).sum(axis=-1)


def _row_factors(Phi: np.ndarray) -> np.ndarray:
    """Per-sensor square factors ``U_i`` with ``U_i^T U_i = sum_k phi_ki phi_ki^T``."""
    N, p, n = Phi.shape
    rows = np.transpose(Phi, (1, 0, 2))              # (p, N, n)
    if N < n:
        rows = np.concatenate([rows, np.zeros((p, n - N, n))], axis=1)
    return np.linalg.qr(rows, mode="r")[:, :n, :]


@dataclass(frozen=True)
class SensorGramians:
    """Per-sensor Gramian terms ``W_i`` for a fixed anchor, schedule and window.

    ``factors[i]`` is an ``n x n`` matrix with ``factors[i].T @ factors[i] == terms[i]``;
    determinant metrics are evaluated from stacked factors.
    """

    terms: np.ndarray        # (p, n, n)
    factors: np.ndarray      # (p, n, n)
    window: int
    anchor: np.ndarray

    @classmethod
    def from_phi(cls, Phi: np.ndarray, anchor) -> "SensorGramians":
        terms = np.einsum("kia,kib->iab", Phi, Phi, optimize=True)
        return cls(terms=terms, factors=_row_factors(Phi), window=Phi.shape[0],
                   anchor=np.asarray(anchor, dtype=float))

    @classmethod
    def compute(cls, ss: StateSpace, x0, sched: InputSchedule, N: int) -> "SensorGramians":
        return cls.from_phi(transition_jacobians(ss, x0, sched, N), x0)

    @property
    def p(self) -> int:
        return self.terms.shape[0]

    @property
    def n(self) -> int:
        return self.terms.shape[1]

    @staticmethod
    def _gamma(gamma) -> np.ndarray:
        return np.asarray(gamma.gamma if isinstance(gamma, SensorSelection) else gamma, dtype=float)

    def matrix(self, gamma) -> np.ndarray:
        return np.tensordot(self._gamma(gamma), self.terms, axes=1)

    def trace_contributions(self) -> np.ndarray:
        return np.einsum("iaa->i", self.terms)

    def trace(self, gamma) -> float:
        return float(self._gamma(gamma) @ self.trace_contributions())

    def logdet(self, gamma) -> float:
        g = self._gamma(gamma)
        idx = np.flatnonzero(g > 0)
        if idx.size == 0:
            return -np.inf
        F = (np.sqrt(g[idx])[:, None, None] * self.factors[idx]).reshape(-1, self.n)
        return float(stacked_logdet(F))

    def geomean_det(self, gamma) -> float:
        v = self.logdet(gamma)
        return 0.0 if not np.isfinite(v) else float(np.exp(v / self.n))

    def metric(self, name: str, gamma) -> float:
        if name == "trace":
            return self.trace(gamma)
        if name in ("det", "geomean_det"):
            return self.geomean_det(gamma)
        raise ValueError(f"unknown metric {name!r}")

    def result(self, gamma) -> GramianResult:
        W = self.matrix(gamma)
        W = 0.5 * (W + W.T)
        return GramianResult(W_o=W, trace_value=float(np.trace(W)), geomean_det=self.geomean_det(gamma),
                             window=self.window, anchor=self.anchor)


def gramian(sel: SensorSelection, ss: StateSpace, x0, sched: InputSchedule, N: int) -> GramianResult:
    """``W_o = J_w^T J_w`` with its trace and geometric-mean-determinant metrics."""
    Phi = transition_jacobians(ss, x0, sched, N)
    Jw = build_Jw(sel, Phi)
    W = Jw.T @ Jw
    W = 0.5 * (W + W.T)
    geomean_det(W)  # rejects indefinite Gramians
    # same eigenvalues, taken from the factor for accuracy
    ld = stacked_logdet(Jw)
    geo = float(np.exp(ld / ss.n)) if np.isfinite(ld) else 0.0
    return GramianResult(W_o=W, trace_value=float(np.trace(W)), geomean_det=geo,
                         window=N, anchor=np.asarray(x0, dtype=float))


def trace_contributions(ss: StateSpace, x0, sched: InputSchedule, N: int) -> np.ndarray:
    """``t_i`` with ``trace(W_o(gamma)) = sum_i gamma_i t_i``."""
    Phi = transition_jacobians(ss, x0, sched, N)
    return np.einsum("kia,kia->i", Phi, Phi)


def write_gramian(path_csv, path_json, res: GramianResult) -> None:
    np.savetxt(path_csv, res.W_o, delimiter=",", fmt="%.12g")
    with open(path_json, "w") as fh:
        json.dump(res.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")

