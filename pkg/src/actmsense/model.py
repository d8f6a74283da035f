"""Asymmetric cell transmission model: direct min-form and compact state space.

Two independent evaluation routes are provided:

* :func:`step_direct` evaluates the nested-min flow equations as written.
* :func:`build_state_space` expands every ``min`` analytically and returns
  ``x+ = A x + G f(x, u) + B_u u``; :func:`step_compact` evaluates that form.

The two must agree to round-off for every state/input; this is the main
correctness check of the decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import backend
from ._program import AtomTable, Expr, Program, iter_nonzero, split_row
from .config import HighwayConfig


def min_analytic(a, b):
    """``min(a, b)`` written as ``(a + b - |a - b|) / 2``."""
    return 0.5 * (a + b - np.abs(a - b))


# --------------------------------------------------------------------------
# direct min-form


@dataclass(frozen=True)
class DirectNet:
    """Flat arrays describing a highway for the numeric kernels."""

    N: int
    n: int
    m: int
    kind: np.ndarray          # 0 plain, 1 on-ramp, 2 off-ramp (per mainline segment)
    beta: np.ndarray
    xi: np.ndarray
    ramp_state: np.ndarray    # state index of the attached ramp cell, -1 if none
    ramp_input: np.ndarray    # input index of the attached ramp, -1 if none
    v_f: float
    w_c: float
    rho_c: float
    rho_m: float
    c: float                  # T / l

    @classmethod
    def from_config(cls, cfg: HighwayConfig) -> "DirectNet":
        t, d = cfg.topology, cfg.diagram
        kind = np.zeros(t.N, dtype=np.int64)
        beta = np.zeros(t.N)
        xi = np.zeros(t.N)
        rs = -np.ones(t.N, dtype=np.int64)
        ri = -np.ones(t.N, dtype=np.int64)
        for i in t.onramps:
            kind[i - 1] = 1
            xi[i - 1] = cfg.xi(i)
            rs[i - 1] = t.onramp_state(i)
            ri[i - 1] = t.onramp_input(i)
        for i in t.offramps:
            kind[i - 1] = 2
            beta[i - 1] = cfg.beta(i)
            rs[i - 1] = t.offramp_state(i)
            ri[i - 1] = t.offramp_input(i)
        return cls(t.N, t.n, t.m, kind, beta, xi, rs, ri,
                   d.v_f, d.w_c, d.rho_c, d.rho_m, t.T / t.l)


def _check_dims(cfg: HighwayConfig, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (cfg.n,) or u.shape != (cfg.m,):
        raise ValueError(f"expected x of length {cfg.n} and u of length {cfg.m}, "
                         f"got {x.shape} and {u.shape}")
    return x, u


def demand(i: int, x, u, cfg: HighwayConfig) -> float:
    """Demand of mainline segment ``i`` (1-based); ``demand(0)`` is ``f_in``."""
    x, u = _check_dims(cfg, x, u)
    t, d = cfg.topology, cfg.diagram
    if i == 0:
        return float(u[0])
    if not 1 <= i <= t.N:
        raise IndexError(f"segment {i} out of range 0..{t.N}")
    rho = x[i - 1]
    if t.kind(i) == "off":
        b = cfg.beta(i)
        sig_chk = d.w_c * (d.rho_m - x[t.offramp_state(i)])
        return float(min((1 - b) * d.v_f * rho, (1 - b) * d.capacity, (1 - b) / b * sig_chk))
    return float(min(d.v_f * rho, d.capacity))


def onramp_flow(i: int, x, cfg: HighwayConfig) -> float:
    """Flow from the on-ramp of segment ``i`` into the mainline."""
    t, d = cfg.topology, cfg.diagram
    xi = cfg.xi(i)
    return float(min(d.v_f * x[t.onramp_state(i)], xi * (d.rho_m - x[i - 1]), xi / d.w_c * d.capacity))


def supply(i: int, x, u, cfg: HighwayConfig) -> float:
    """Supply of mainline segment ``i`` (1-based); ``supply(N+1)`` is ``f_out``."""
    x, u = _check_dims(cfg, x, u)
    t, d = cfg.topology, cfg.diagram
    if i == t.N + 1:
        return float(u[1])
    if not 1 <= i <= t.N:
        raise IndexError(f"segment {i} out of range 1..{t.N + 1}")
    s = min(d.w_c * (d.rho_m - x[i - 1]), d.capacity)
    if t.kind(i) == "on":
        s -= onramp_flow(i, x, cfg)
    return float(s)


def step_direct(x, u, cfg: HighwayConfig | DirectNet) -> np.ndarray:
    """One ACTM time step evaluated with nested ``min`` functions."""
    net = cfg if isinstance(cfg, DirectNet) else DirectNet.from_config(cfg)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (net.n,) or u.shape != (net.m,):
        raise ValueError("state/input dimension mismatch")
    return backend.impl.direct_step(net, x, u)


def rollout_direct(x0, U, cfg: HighwayConfig | DirectNet, add=None) -> np.ndarray:
    """States ``x[0..K]`` for inputs ``U[0..K-1]``; ``add[k]`` is added after step k."""
    net = cfg if isinstance(cfg, DirectNet) else DirectNet.from_config(cfg)
    x0 = np.asarray(x0, dtype=float)
    U = np.ascontiguousarray(U, dtype=float)
    if add is not None:
        add = np.ascontiguousarray(add, dtype=float)
        if add.shape != (U.shape[0], net.n):
            raise ValueError("additive disturbance shape mismatch")
    if x0.shape != (net.n,) or U.ndim != 2 or U.shape[1] != net.m:
        raise ValueError("state/input dimension mismatch")
    return backend.impl.direct_rollout(net, x0, U, add)


# --------------------------------------------------------------------------
# compact state space


def _expand_rows(cfg: HighwayConfig):
    """Symbolic update expressions for every state, plus the atom table."""
    t, d = cfg.topology, cfg.diagram
    vf, wc, rc, rm = d.v_f, d.w_c, d.rho_c, d.rho_m
    l, c = t.l, t.T / t.l
    cap = vf * rc
    N = t.N
    tab = AtomTable()
    X = Expr.state
    K = Expr.constant

    D, S, delta, sigma, r = {}, {}, {}, {}, {}
    rescale: dict[int, dict[int, float]] = {}
    for i in range(1, N + 1):
        D[i] = tab.min_(vf * X(i - 1), K(cap), 1 / (vf * l), f"|v_f rho_{i} - v_f rho_c|")
        S[i] = tab.min_(wc * (rm - X(i - 1)), K(cap), 1 / (wc * l), f"|w_c(rho_m - rho_{i}) - v_f rho_c|")
    for i in range(1, N + 1):
        kind = t.kind(i)
        if kind == "off":
            b = cfg.beta(i)
            sig_chk = wc * (rm - X(t.offramp_state(i)))
            delta[i] = (1 - b) * tab.min_(D[i], sig_chk / b, 1 / (vf * wc * l),
                                          f"|min(v_f rho_{i}, v_f rho_c) - sigchk_{i}/beta_{i}|")
            k_dem = next(k for (kind, k) in delta[i].terms if kind == "a" and ("a", k) not in D[i].terms)
            # downstream rows see this atom through delta_i, i.e. with weight (1 - beta)
            for row in range(t.n):
                if row not in (i - 1, t.offramp_state(i)):
                    rescale.setdefault(row, {})[k_dem] = 1 - b
        else:
            delta[i] = D[i]
        if kind == "on":
            xi = cfg.xi(i)
            r[i] = tab.min_(vf * X(t.onramp_state(i)), (xi / wc) * S[i], 1 / (vf * wc * l),
                            f"|v_f rhohat_{i} - xi_{i}/w_c min(.)|")
            sigma[i] = S[i] - r[i]
        else:
            sigma[i] = S[i]

    q = {0: tab.min_(Expr.input(0), sigma[1], 1 / (wc * l), "|f_in - sigma_1|")}
    for i in range(1, N):
        q[i] = tab.min_(delta[i], sigma[i + 1], 1 / (vf * wc * l), f"|delta_{i} - sigma_{i + 1}|")
    q[N] = tab.min_(delta[N], Expr.input(1), 1 / (vf * l), f"|delta_{N} - f_out|")

    # On-ramp segment rows keep the supply atom twice: once from sigma_i
    # directly and once through the merge flow r_i (which enters the row
    # with net weight c/2). Same product G f, fixed per-class block length.
    splits: dict[int, dict[int, float]] = {}
    for i in t.onramps:
        k_sup = next(k for (kind, k) in S[i].terms if kind == "a")
        splits[i - 1] = {k_sup: 0.5 * c * r[i].terms[("a", k_sup)]}

    rows: list[Expr] = [None] * t.n
    for i in range(1, N + 1):
        out = q[i] / (1 - cfg.beta(i)) if t.kind(i) == "off" else q[i]
        inflow = q[i - 1] + r[i] if i in r else q[i - 1]
        rows[i - 1] = X(i - 1) + c * (inflow - out)
    for i in t.onramps:
        s = t.onramp_state(i)
        sig_hat = tab.min_(wc * (rm - X(s)), K(cap), 1 / (wc * l), f"|w_c(rho_m - rhohat_{i}) - v_f rho_c|")
        r_in = tab.min_(sig_hat, Expr.input(t.onramp_input(i)), 1 / (wc * l), f"|sighat_{i} - fhat_{i}|")
        rows[s] = X(s) + c * (r_in - r[i])
    for i in t.offramps:
        s = t.offramp_state(i)
        b = cfg.beta(i)
        del_chk = tab.min_(vf * X(s), K(cap), 1 / (vf * l), f"|v_f rhochk_{i} - v_f rho_c|")
        s_out = tab.min_(del_chk, Expr.input(t.offramp_input(i)), 1 / (vf * l), f"|delchk_{i} - fchk_{i}|")
        rows[s] = X(s) + c * (b / (1 - b) * q[i] - s_out)
    return rows, tab, splits, rescale


@dataclass
class StateSpace:
    """Compact form ``x+ = A x + G f(x, u) + B_u u``.

    ``G`` is block diagonal: row ``i`` owns the block ``f_i`` of ``f``, made
    of scaled atom values followed by one constant entry with unit weight.
    Entry ``j`` of ``f`` is ``f_mult[j] * a[f_atom[j]]`` (or ``f_const[j]``
    when ``f_atom[j] == -1``), where ``a`` holds the unique atom values.
    ``W`` and ``c0`` are the same map aggregated per atom, so
    ``G f = W a + c0``; the fast kernels use that form.
    """

    A: np.ndarray
    G: np.ndarray
    B_u: np.ndarray
    program: Program
    f_atom: np.ndarray
    f_mult: np.ndarray
    f_const: np.ndarray
    block_lengths: list[int]
    c0: np.ndarray
    W: np.ndarray
    cfg: HighwayConfig = field(repr=False)
    is_linear: bool = False
    _Wcsr: tuple = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B_u.shape[1]

    @property
    def g(self) -> int:
        return self.G.shape[1]

    @property
    def block_slices(self) -> list[slice]:
        edges = np.concatenate([[0], np.cumsum(self.block_lengths)])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def w_csr(self):
        """``W`` in CSR form ``(indptr, indices, values)``."""
        if self._Wcsr is None:
            indptr, idx, val = [0], [], []
            for row in self.W:
                nz = np.flatnonzero(row)
                idx.extend(nz.tolist())
                val.extend(row[nz].tolist())
                indptr.append(len(idx))
            self._Wcsr = (np.asarray(indptr, dtype=np.int64), np.asarray(idx, dtype=np.int64),
                          np.asarray(val, dtype=float))
        return self._Wcsr

    def linear(self) -> "StateSpace":
        """Copy with the nonlinearity switched off (``G = 0``, ``f`` ignored)."""
        return replace(self, G=np.zeros_like(self.G), c0=np.zeros(self.n),
                       W=np.zeros_like(self.W), is_linear=True, _Wcsr=None)


def build_state_space(cfg: HighwayConfig) -> StateSpace:
    rows, tab, splits, rescale = _expand_rows(cfg)
    n, m = cfg.n, cfg.m
    prog = Program.from_table(tab, n, m)
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    c0 = np.zeros(n)
    W = np.zeros((n, prog.K))
    f_atom, f_mult, f_const, g_coef, lengths = [], [], [], [], []
    for i, expr in enumerate(rows):
        a_row, b_row, const, atoms = split_row(expr, n, m)
        A[i], B[i], c0[i] = a_row, b_row, const
        ks, cs = [], []
        for k, coef in iter_nonzero(atoms):
            ks.append(k)
            cs.append(coef)
            W[i, k] = coef
        for k, share in splits.get(i, {}).items():
            cs[ks.index(k)] -= share
            ks.append(k)
            cs.append(share)
        mults = [rescale.get(i, {}).get(k, 1.0) for k in ks]
        f_atom.extend(ks + [-1])
        f_mult.extend(mults + [0.0])
        f_const.extend([0.0] * len(ks) + [const])
        g_coef.append([c / mu for c, mu in zip(cs, mults)] + [1.0])
        lengths.append(len(ks) + 1)
    G = np.zeros((n, sum(lengths)))
    col = 0
    for i, cs in enumerate(g_coef):
        G[i, col:col + len(cs)] = cs
        col += len(cs)
    return StateSpace(A=A, G=G, B_u=B, program=prog,
                      f_atom=np.asarray(f_atom, dtype=np.int64), f_mult=np.asarray(f_mult),
                      f_const=np.asarray(f_const), block_lengths=lengths,
                      c0=c0, W=W, cfg=cfg)


def atom_values(ss: StateSpace, x, u) -> np.ndarray:
    x, u = _check_dims(ss.cfg, x, u)
    return backend.impl.atoms_eval(ss.program, x, u)


def eval_f(x, u, ss: StateSpace) -> np.ndarray:
    """The nonlinearity vector ``f(x, u)`` of length ``g``."""
    a = atom_values(ss, x, u)
    return f_from_atoms(ss, a)


def f_from_atoms(ss: StateSpace, a: np.ndarray) -> np.ndarray:
    mask = ss.f_atom >= 0
    out = ss.f_const.copy()
    out[mask] = ss.f_mult[mask] * a[ss.f_atom[mask]]
    return out


def step_compact(ss: StateSpace, x, u) -> np.ndarray:
    """``A x + G f(x, u) + B_u u``."""
    x, u = _check_dims(ss.cfg, x, u)
    if ss.is_linear:
        return ss.A @ x + ss.B_u @ u
    a = backend.impl.atoms_eval(ss.program, x, u)
    return ss.A @ x + ss.B_u @ u + ss.c0 + ss.W @ a
