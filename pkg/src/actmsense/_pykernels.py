"""Pure numpy reference kernels. Same signatures as the compiled module."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ._program import TIE_TOL

NAME = "python"


def direct_step(net, x, u):
    N, c = net.N, net.c
    vf, wc, rm = net.v_f, net.w_c, net.rho_m
    cap = vf * net.rho_c
    on = np.flatnonzero(net.kind == 1)
    off = np.flatnonzero(net.kind == 2)
    rho = x[:N]

    delta = np.minimum(vf * rho, cap)
    if off.size:
        b = net.beta[off]
        chk = x[net.ramp_state[off]]
        delta[off] = np.minimum((1 - b) * delta[off], (1 - b) / b * wc * (rm - chk))
    S = np.minimum(wc * (rm - rho), cap)
    r = np.zeros(N)
    if on.size:
        hat = x[net.ramp_state[on]]
        r[on] = np.minimum(vf * hat, net.xi[on] / wc * S[on])
    sigma = S - r

    q = np.empty(N + 1)
    q[0] = min(u[0], sigma[0])
    q[1:N] = np.minimum(delta[:-1], sigma[1:])
    q[N] = min(delta[N - 1], u[1])

    out = x.copy()
    outflow = q[1:].copy()
    if off.size:
        outflow[off] /= 1 - net.beta[off]
    out[:N] = rho + c * (q[:-1] + r - outflow)
    if on.size:
        sig_hat = np.minimum(wc * (rm - hat), cap)
        r_in = np.minimum(sig_hat, u[net.ramp_input[on]])
        out[net.ramp_state[on]] = hat + c * (r_in - r[on])
    if off.size:
        del_chk = np.minimum(vf * chk, cap)
        s_out = np.minimum(del_chk, u[net.ramp_input[off]])
        out[net.ramp_state[off]] = chk + c * (b / (1 - b) * q[1:][off] - s_out)
    return out


def direct_rollout(net, x0, U, add=None):
    K = U.shape[0]
    X = np.empty((K + 1, net.n))
    X[0] = x0
    for k in range(K):
        X[k + 1] = direct_step(net, X[k], U[k])
        if add is not None:
            X[k + 1] += add[k]
    return X


def _levels(prog):
    """Per-depth sparse inner-expression matrices, cached on the program."""
    cache = getattr(prog, "_py_levels", None)
    if cache is not None:
        return cache
    width = prog.n + prog.m + prog.K
    M = sp.csr_matrix((prog.coef, prog.idx, prog.indptr), shape=(prog.K, width))
    levels = []
    for d in np.unique(prog.depth):
        rows = np.flatnonzero(prog.depth == d)
        levels.append((rows, M[rows], prog.const[rows], prog.scale[rows]))
    object.__setattr__(prog, "_py_levels", levels)
    return levels


def atoms_eval(prog, x, u):
    v = np.concatenate([x, u, np.zeros(prog.K)])
    off = prog.n + prog.m
    for rows, M, c, s in _levels(prog):
        v[off + rows] = s * np.abs(M @ v + c)
    return v[off:].copy()


def _sign(z):
    out = np.sign(z)
    out[np.abs(z) <= TIE_TOL] = 0.0
    return out


def atoms_jac(prog, x, u):
    """Atom values and their Jacobian with respect to the state (K x n)."""
    n, off = prog.n, prog.n + prog.m
    v = np.concatenate([x, u, np.zeros(prog.K)])
    dv = np.zeros((off + prog.K, n))
    dv[:n] = np.eye(n)
    for rows, M, c, s in _levels(prog):
        z = M @ v + c
        v[off + rows] = s * np.abs(z)
        dv[off + rows] = (s * _sign(z))[:, None] * (M @ dv)
    return v[off:].copy(), dv[off:].copy()


def step_jacobians(prog, A, w_indptr, w_idx, w_val, X, U):
    """``A + W dA(x_k, u_k)`` for every row of ``X``/``U``."""
    K = X.shape[0]
    n = A.shape[0]
    W = sp.csr_matrix((w_val, w_idx, w_indptr), shape=(n, prog.K))
    out = np.empty((K, n, n))
    for k in range(K):
        _, dA = atoms_jac(prog, X[k], U[k])
        out[k] = A + W @ dA
    return out
