# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for rollouts and atom Jacobians.

Signatures and results match :mod:`actmsense._pykernels`.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

NAME = "compiled"

cdef double TIE_TOL = 1e-12


cdef inline double dmin(double a, double b) nogil:
    return a if a < b else b


cdef void _step(long N, const long[:] kind, const double[:] beta, const double[:] xi,
                const long[:] rs, const long[:] ri, double vf, double wc, double rhoc,
                double rm, double c, const double[:] x, const double[:] u,
                double[:] out, double[:] delta, double[:] sigma, double[:] r, double[:] q) nogil:
    cdef long i, s
    cdef double cap = vf * rhoc, S, b, chk, hat, outflow, sig_hat, r_in, del_chk, s_out
    for i in range(N):
        delta[i] = dmin(vf * x[i], cap)
        S = dmin(wc * (rm - x[i]), cap)
        r[i] = 0.0
        if kind[i] == 2:
            b = beta[i]
            chk = x[rs[i]]
            delta[i] = dmin((1 - b) * delta[i], (1 - b) / b * wc * (rm - chk))
        elif kind[i] == 1:
            hat = x[rs[i]]
            r[i] = dmin(vf * hat, xi[i] / wc * S)
        sigma[i] = S - r[i]
    q[0] = dmin(u[0], sigma[0])
    for i in range(1, N):
        q[i] = dmin(delta[i - 1], sigma[i])
    q[N] = dmin(delta[N - 1], u[1])
    for i in range(x.shape[0]):
        out[i] = x[i]
    for i in range(N):
        outflow = q[i + 1]
        if kind[i] == 2:
            outflow = outflow / (1 - beta[i])
        out[i] = x[i] + c * (q[i] + r[i] - outflow)
        if kind[i] == 1:
            s = rs[i]
            hat = x[s]
            sig_hat = dmin(wc * (rm - hat), cap)
            r_in = dmin(sig_hat, u[ri[i]])
            out[s] = hat + c * (r_in - r[i])
        elif kind[i] == 2:
            s = rs[i]
            chk = x[s]
            b = beta[i]
            del_chk = dmin(vf * chk, cap)
            s_out = dmin(del_chk, u[ri[i]])
            out[s] = chk + c * (b / (1 - b) * q[i + 1] - s_out)


def direct_step(net, x, u):
    cdef long N = net.N
    out = np.empty(net.n)
    work = np.empty((4, N + 1))
    _step(N, net.kind, net.beta, net.xi, net.ramp_state, net.ramp_input,
          net.v_f, net.w_c, net.rho_c, net.rho_m, net.c,
          np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(u, dtype=float),
          out, work[0], work[1], work[2], work[3])
    return out


def direct_rollout(net, x0, U, add=None):
    cdef long N = net.N, n = net.n, K = U.shape[0], k, j
    X_arr = np.empty((K + 1, n))
    cdef double[:, :] X = X_arr
    cdef const double[:, :] Uv = U
    cdef const double[:, :] Av
    cdef bint has_add = add is not None
    if has_add:
        Av = add
    work = np.empty((4, N + 1))
    cdef double[:] d0 = work[0], d1 = work[1], d2 = work[2], d3 = work[3]
    cdef const long[:] kind = net.kind, rs = net.ramp_state, ri = net.ramp_input
    cdef const double[:] beta = net.beta, xi = net.xi
    cdef double vf = net.v_f, wc = net.w_c, rhoc = net.rho_c, rm = net.rho_m, c = net.c
    X_arr[0] = x0
    with nogil:
        for k in range(K):
            _step(N, kind, beta, xi, rs, ri, vf, wc, rhoc, rm, c, X[k], Uv[k], X[k + 1], d0, d1, d2, d3)
            if has_add:
                for j in range(n):
                    X[k + 1, j] += Av[k, j]
    return X_arr


cdef void _atoms(long n, long m, long K, const long[:] indptr, const long[:] idx,
                 const double[:] coef, const double[:] const_, const double[:] scale,
                 double[:] v, double[:] z) nogil:
    cdef long k, p, off = n + m
    cdef double acc
    for k in range(K):
        acc = const_[k]
        for p in range(indptr[k], indptr[k + 1]):
            acc += coef[p] * v[idx[p]]
        z[k] = acc
        v[off + k] = scale[k] * fabs(acc)


def atoms_eval(prog, x, u):
    cdef long n = prog.n, m = prog.m, K = prog.K
    v = np.zeros(n + m + K)
    v[:n] = x
    v[n:n + m] = u
    z = np.empty(K)
    _atoms(n, m, K, prog.indptr, prog.idx, prog.coef, prog.const, prog.scale, v, z)
    return v[n + m:].copy()


cdef void _atoms_jac(long n, long m, long K, const long[:] indptr, const long[:] idx,
                     const double[:] coef, const double[:] const_, const double[:] scale,
                     double[:] v, double[:] z, double[:, :] dA) nogil:
    # dA holds d(atom)/dx; inputs have zero state derivative
    cdef long k, p, j, src, off = n + m
    cdef double sg, cc
    _atoms(n, m, K, indptr, idx, coef, const_, scale, v, z)
    for k in range(K):
        for j in range(n):
            dA[k, j] = 0.0
        if fabs(z[k]) <= TIE_TOL:
            continue
        sg = scale[k] if z[k] > 0 else -scale[k]
        for p in range(indptr[k], indptr[k + 1]):
            src = idx[p]
            cc = sg * coef[p]
            if src < n:
                dA[k, src] += cc
            elif src >= off:
                for j in range(n):
                    dA[k, j] += cc * dA[src - off, j]


def atoms_jac(prog, x, u):
    cdef long n = prog.n, m = prog.m, K = prog.K
    v = np.zeros(n + m + K)
    v[:n] = x
    v[n:n + m] = u
    z = np.empty(K)
    dA = np.empty((K, n))
    _atoms_jac(n, m, K, prog.indptr, prog.idx, prog.coef, prog.const, prog.scale, v, z, dA)
    return v[n + m:].copy(), dA


def step_jacobians(prog, A, w_indptr, w_idx, w_val, X, U):
    cdef long n = prog.n, m = prog.m, K = prog.K, T = X.shape[0], t, i, j, p, k
    out_arr = np.empty((T, n, n))
    cdef double[:, :, :] out = out_arr
    cdef const double[:, :] Av = np.ascontiguousarray(A, dtype=float)
    cdef const double[:, :] Xv = np.ascontiguousarray(X, dtype=float)
    cdef const double[:, :] Uv = np.ascontiguousarray(U, dtype=float)
    cdef const long[:] wp = w_indptr, wi = w_idx
    cdef const double[:] wv = w_val
    cdef const long[:] indptr = prog.indptr, idx = prog.idx
    cdef const double[:] coef = prog.coef, const_ = prog.const, scale = prog.scale
    v_arr = np.zeros(n + m + K)
    cdef double[:] v = v_arr
    cdef double[:] z = np.empty(K)
    cdef double[:, :] dA = np.empty((K, n))
    with nogil:
        for t in range(T):
            for j in range(n):
                v[j] = Xv[t, j]
            for j in range(m):
                v[n + j] = Uv[t, j]
            _atoms_jac(n, m, K, indptr, idx, coef, const_, scale, v, z, dA)
            for i in range(n):
                for j in range(n):
                    out[t, i, j] = Av[i, j]
                for p in range(wp[i], wp[i + 1]):
                    k = wi[p]
                    for j in range(n):
                        out[t, i, j] += wv[p] * dA[k, j]
    return out_arr
