"""Small dense semidefinite programs solved by ADMM operator splitting.

Problems are stated over named variable blocks (symmetric matrices, general
matrices, scalars) with affine matrix-valued constraints ``F_j(v) <= 0`` in
the semidefinite order. Internally every constraint becomes a slack
``s_j = -F_j(v) - delta I`` in the PSD cone, and the solver alternates a
regularized least-squares step on the variables with a Euclidean projection
of the slacks onto the cone (one eigendecomposition per block).

Every returned point is re-verified by evaluating the original constraint
maps and checking their largest eigenvalues, independently of the solver's
internal residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

OPTIMAL = "optimal"
FEASIBLE_SUBOPTIMAL = "feasible-suboptimal"
INFEASIBLE = "infeasible-detected"
CAP = "cap"


class SdpDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str              # "sym" | "full" | "scalar"
    shape: tuple[int, int] = (1, 1)

    @property
    def size(self) -> int:
        if self.kind == "sym":
            n = self.shape[0]
            return n * (n + 1) // 2
        if self.kind == "full":
            return self.shape[0] * self.shape[1]
        if self.kind == "scalar":
            return 1
        raise SdpDimensionError(f"unknown variable kind {self.kind!r}")

    def unpack(self, vec: np.ndarray):
        if self.kind == "scalar":
            return float(vec[0])
        if self.kind == "full":
            return vec.reshape(self.shape).copy()
        n = self.shape[0]
        out = np.zeros((n, n))
        out[np.triu_indices(n)] = vec
        return out + np.triu(out, 1).T


@dataclass
class SdpProblem:
    """Minimize an affine objective subject to ``blocks(v)[j] <= 0`` (PSD order).

    ``blocks`` maps a dict of variable values to a list of symmetric matrices
    and must be affine in the values; ``objective`` maps the same dict to a
    scalar and must also be affine. ``strict[j]`` realizes ``blocks[j] < 0``
    as ``blocks[j] <= -delta I``.
    """

    variables: list[Variable]
    blocks: Callable[[dict], list]
    objective: Callable[[dict], float]
    strict: list[bool] | None = None
    names: list[str] | None = None
    delta: float = 1e-9
    verify_tol: float = 1e-7
    meta: dict = field(default_factory=dict)

    @property
    def n_coords(self) -> int:
        return sum(v.size for v in self.variables)

    def unpack(self, z: np.ndarray) -> dict:
        out, pos = {}, 0
        for v in self.variables:
            out[v.name] = v.unpack(z[pos:pos + v.size])
            pos += v.size
        return out

    def evaluate(self, z: np.ndarray) -> list[np.ndarray]:
        return [np.asarray(b, dtype=float) for b in self.blocks(self.unpack(z))]

    def max_eigenvalues(self, z: np.ndarray) -> np.ndarray:
        return np.array([np.linalg.eigvalsh(0.5 * (F + F.T))[-1] for F in self.evaluate(z)])


@dataclass
class SdpResult:
    values: dict
    z: np.ndarray
    status: str
    objective: float
    iterations: int
    max_eigs: np.ndarray
    primal_residual: float
    dual_residual: float
    certificate: tuple | None = None      # (excluded radius, PSD multipliers) when infeasible

    @property
    def feasible(self) -> bool:
        return self.status in (OPTIMAL, FEASIBLE_SUBOPTIMAL)


# -- symmetric vectorization (inner-product preserving) ------------------------

def _svec_index(n):
    iu = np.triu_indices(n)
    w = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    return iu, w


def svec(S: np.ndarray) -> np.ndarray:
    iu, w = _svec_index(S.shape[0])
    return S[iu] * w


def smat(v: np.ndarray, n: int) -> np.ndarray:
    iu, w = _svec_index(n)
    out = np.zeros((n, n))
    out[iu] = v / w
    return out + np.triu(out, 1).T


def _psd_project(v: np.ndarray, n: int) -> np.ndarray:
    lam, Q = np.linalg.eigh(smat(v, n))
    return svec((Q * np.clip(lam, 0.0, None)) @ Q.T)


# -- assembly -------------------------------------------------------------------

@dataclass
class _Compiled:
    A: sp.csr_matrix          # svec of the linear part, all blocks stacked
    b: np.ndarray             # svec(-delta I - F0)
    c: np.ndarray
    c0: float
    sizes: list[int]
    offsets: np.ndarray
    row_scale: np.ndarray     # per block
    col_scale: np.ndarray


def _compile(prob: SdpProblem) -> _Compiled:
    K = prob.n_coords
    zero = np.zeros(K)
    F0 = prob.evaluate(zero)
    for j, F in enumerate(F0):
        if F.ndim != 2 or F.shape[0] != F.shape[1]:
            raise SdpDimensionError(f"constraint block {j} is not square")
    sizes = [F.shape[0] for F in F0]
    strict = prob.strict if prob.strict is not None else [True] * len(F0)
    if len(strict) != len(F0):
        raise SdpDimensionError("strict flags do not match the number of blocks")
    c0 = float(prob.objective(prob.unpack(zero)))
    c = np.empty(K)
    cols = []
    for k in range(K):
        e = np.zeros(K)
        e[k] = 1.0
        Fk = prob.evaluate(e)
        if [F.shape[0] for F in Fk] != sizes:
            raise SdpDimensionError("constraint block sizes depend on the variables")
        col = np.concatenate([svec(Fk[j] - F0[j]) for j in range(len(sizes))])
        cols.append(sp.csc_matrix(col[:, None]))
        c[k] = float(prob.objective(prob.unpack(e))) - c0
    A = sp.hstack(cols, format="csr") if cols else sp.csr_matrix((sum(s * (s + 1) // 2 for s in sizes), 0))
    dims = [s * (s + 1) // 2 for s in sizes]
    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(np.int64)
    b = np.concatenate([svec(-(prob.delta if strict[j] else 0.0) * np.eye(s) - F0[j])
                        for j, s in enumerate(sizes)])
    # affinity check at a random point
    z = np.random.default_rng(0).standard_normal(K)
    lhs = np.concatenate([svec(F) for F in prob.evaluate(z)])
    rhs = A @ z + np.concatenate([svec(F) for F in F0])
    if not np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(lhs).max())):
        raise SdpDimensionError("constraint map is not affine in the variables")
    # block scaling by Frobenius norm of each block's data
    row_scale = np.ones(len(sizes))
    for j in range(len(sizes)):
        sl = slice(offsets[j], offsets[j + 1])
        nrm = max(sp.linalg.norm(A[sl]) if A.shape[1] else 0.0, np.linalg.norm(b[sl]))
        row_scale[j] = 1.0 / nrm if nrm > 0 else 1.0
    R = sp.diags(np.repeat(row_scale, dims))
    A = (R @ A).tocsc()
    b = np.repeat(row_scale, dims) * b
    col_norm = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
    col_scale = np.where(col_norm > 0, 1.0 / np.maximum(col_norm, 1e-300), 1.0)
    A = (A @ sp.diags(col_scale)).tocsr()
    return _Compiled(A=A, b=b, c=c, c0=c0, sizes=sizes, offsets=offsets,
                     row_scale=row_scale, col_scale=col_scale)


# -- solver ---------------------------------------------------------------------

def solve_sdp(prob: SdpProblem, rho: float = 1.0, sigma: float = 1e-6, relax: float = 1.6,
              max_iter: int = 50_000, eps_abs: float = 1e-9, eps_rel: float = 1e-8,
              gap_rel: float = 1e-5, check_every: int = 25, adapt_every: int = 100,
              anderson: int = 10, history: list | None = None) -> SdpResult:
    """ADMM with over-relaxation; see the module docstring for the splitting.

    The penalty ``rho`` is rebalanced every ``adapt_every`` iterations from the
    ratio of scaled primal and dual residuals (one refactorization each time).
    ``anderson > 0`` enables safeguarded type-II Anderson acceleration of the
    ADMM fixed-point map with that memory; a step whose fixed-point residual
    grows is discarded in favour of the plain ADMM step.
    """
    C = _compile(prob)
    A, b = C.A, C.b
    AT = A.T.tocsr()
    K = A.shape[1]
    m_rows = A.shape[0]
    c = C.c * C.col_scale
    c_scale = max(np.abs(c).max(), 1.0) if K else 1.0
    c = c / c_scale
    AtA = (AT @ A).toarray()
    chol = sla.cho_factor(sigma * np.eye(K) + rho * AtA, lower=True)
    slices = [(slice(C.offsets[j], C.offsets[j + 1]), n) for j, n in enumerate(C.sizes)]

    def admm_map(state):
        z, s, y = state[:K], state[K:K + m_rows], state[K + m_rows:]
        z = sla.cho_solve(chol, sigma * z + rho * (AT @ (b - s - y / rho)) - c)
        w_hat = relax * (b - A @ z) + (1.0 - relax) * s
        v = w_hat - y / rho
        s_new = np.empty_like(s)
        for sl, n in slices:
            s_new[sl] = _psd_project(v[sl], n)
        return np.concatenate([z, s_new, y + rho * (s_new - w_hat)])

    s0 = np.empty(m_rows)
    for sl, n in slices:
        s0[sl] = _psd_project(b[sl], n)
    state = np.concatenate([np.zeros(K), s0, np.zeros(m_rows)])
    dG, dT = [], []
    prev_g = prev_T = None
    prev_gn = np.inf
    y_prev = np.zeros(m_rows)
    status = CAP
    it = 0
    best_feasible = None
    r_prim = r_dual = np.inf
    plain = state
    hits = 0
    for it in range(1, max_iter + 1):
        Tw = admm_map(state)
        g = Tw - state
        gn = float(np.linalg.norm(g))
        if anderson and gn > 2.0 * prev_gn and prev_T is not None and state is not plain:
            # safeguard: the accelerated point made things worse
            state = plain
            dG.clear()
            dT.clear()
            prev_g = None
            continue
        if anderson:
            if prev_g is not None:
                dG.append(g - prev_g)
                dT.append(Tw - prev_T)
                if len(dG) > anderson:
                    dG.pop(0)
                    dT.pop(0)
            prev_g, prev_T, prev_gn = g, Tw, gn
            plain = Tw
            if dG:
                Gm = np.stack(dG, axis=1)
                coef = np.linalg.lstsq(Gm, g, rcond=None)[0]
                state = Tw - np.stack(dT, axis=1) @ coef
            else:
                state = Tw
        else:
            state = plain = Tw
        z, s, y = Tw[:K], Tw[K:K + m_rows], Tw[K + m_rows:]

        if it % check_every:
            continue
        Az = A @ z
        r_prim = float(np.linalg.norm(Az + s - b))
        r_dual = float(np.linalg.norm(c + AT @ y))
        pobj = float(c @ z)
        dobj = float(-b @ y)
        gap = abs(pobj - dobj)
        p_scale = max(np.linalg.norm(Az), np.linalg.norm(s), np.linalg.norm(b), 1e-300)
        d_scale = max(np.linalg.norm(AT @ y), np.linalg.norm(c), 1e-300)
        p_tol = eps_abs + eps_rel * p_scale
        d_tol = eps_abs + eps_rel * d_scale
        if history is not None:
            history.append((it, r_prim / p_scale, r_dual / d_scale, gap, rho))
        if r_prim <= p_tol:
            z_orig = z * C.col_scale
            eigs = prob.max_eigenvalues(z_orig)
            if np.all(eigs <= prob.verify_tol):
                obj = C.c0 + float(C.c @ z_orig)
                if best_feasible is None or obj < best_feasible[0]:
                    best_feasible = (obj, z_orig, eigs)
                if r_dual <= d_tol and gap <= gap_rel * max(1.0, abs(pobj), abs(dobj)):
                    status = OPTIMAL
                    break
        if it % adapt_every == 0:
            ratio = np.sqrt((r_prim / p_scale) / max(r_dual / d_scale, 1e-300))
            if (ratio > 5 or ratio < 0.2) and 1e-6 < rho * ratio < 1e6:
                rho *= ratio
                chol = sla.cho_factor(sigma * np.eye(K) + rho * AtA, lower=True)
                state = plain = Tw
                dG.clear()
                dT.clear()
                prev_g = prev_T = None
                prev_gn = np.inf
        # infeasibility: dual iterate increments approach a certificate
        dy = y - y_prev
        y_prev = y.copy()
        if it >= 4 * check_every:
            cert = _infeasibility_certificate(dy, A, AT, b, C)
            hits = hits + 1 if cert is not None else 0
            if hits >= 3:
                z_orig = z * C.col_scale
                return SdpResult(values=prob.unpack(z_orig), z=z_orig, status=INFEASIBLE,
                                 objective=np.nan, iterations=it,
                                 max_eigs=prob.max_eigenvalues(z_orig), primal_residual=r_prim,
                                 dual_residual=r_dual, certificate=cert)

    z_orig = z * C.col_scale
    if status == OPTIMAL:
        obj, eigs = C.c0 + float(C.c @ z_orig), prob.max_eigenvalues(z_orig)
    elif best_feasible is not None:
        status = FEASIBLE_SUBOPTIMAL
        obj, z_orig, eigs = best_feasible
    else:
        obj, eigs = np.nan, prob.max_eigenvalues(z_orig)
    return SdpResult(values=prob.unpack(z_orig), z=z_orig, status=status, objective=obj,
                     iterations=it, max_eigs=eigs, primal_residual=r_prim, dual_residual=r_dual)


def _infeasibility_certificate(dy, A, AT, b, C: _Compiled, ratio_tol: float = 1e-2):
    """Project ``dy`` onto the cone and test it as a Farkas direction.

    For ``y >= 0`` every feasible point satisfies ``(A^T y)^T z <= b^T y``;
    with ``b^T y < 0`` this excludes the ball ``||z|| < |b^T y| / ||A^T y||``
    in scaled variables. The direction is accepted when that radius exceeds
    ``1 / ratio_tol``. Returns ``(radius, blocks)`` or ``None``.
    """
    y = np.empty_like(dy)
    for j, n in enumerate(C.sizes):
        sl = slice(C.offsets[j], C.offsets[j + 1])
        y[sl] = _psd_project(dy[sl], n)
    nrm = np.linalg.norm(y)
    if nrm == 0:
        return None
    y /= nrm
    by = float(b @ y)
    aty = float(np.linalg.norm(AT @ y))
    if by >= -1e-8 or aty > ratio_tol * abs(by):
        return None
    radius = abs(by) / aty if aty > 0 else np.inf
    return radius, [smat(y[C.offsets[j]:C.offsets[j + 1]], n) for j, n in enumerate(C.sizes)]


def dump_blocks(path, prob: SdpProblem, z=None) -> None:
    """Write the constraint blocks at ``z`` (default: zero) as whitespace matrices."""
    z = np.zeros(prob.n_coords) if z is None else np.asarray(z, dtype=float)
    with open(path, "w") as fh:
        for j, F in enumerate(prob.evaluate(z)):
            name = prob.names[j] if prob.names else f"block{j}"
            fh.write(f"# {name} {F.shape[0]}\n")
            np.savetxt(fh, F, fmt="%.17g")
