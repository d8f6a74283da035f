"""Sensor placement: maximize a Gramian metric under a sensor budget.

Two metrics are supported on top of :class:`SensorGramians`:

* ``trace``: modular in the selection, so sorting per-sensor contributions is
  exactly optimal.
* ``det``: the n-th root of ``det W_o(gamma)``; maximized through
  ``log det``, which is concave in the relaxed selection. Solved by
  best-first branch and bound.

Node bounds come from the continuous relaxation over the capped simplex
``{gamma in [lo, hi]^p, sum gamma = r}``. Projected gradient ascent gives an
iterate ``gamma``; the bound ``phi(gamma) + max_s grad . (s - gamma)`` (the
Frank-Wolfe gap) is valid for the relaxation at any iterate, by concavity,
so an unconverged solve never prunes incorrectly.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .observability import SensorGramians, stacked_logdet
from .selection import SensorSelection

METRICS = ("trace", "det")
NODE_CAP = 10_000


class PlacementError(ValueError):
    pass


@dataclass
class PlacementProblem:
    gramians: SensorGramians
    r: int
    metric: str = "trace"
    costs: np.ndarray | None = None
    weight: float = 0.0

    def __post_init__(self):
        if self.metric == "geomean_det":
            self.metric = "det"
        if self.metric not in METRICS:
            raise PlacementError(f"unknown metric {self.metric!r}")
        if not 1 <= self.r <= self.p:
            raise PlacementError(f"budget r = {self.r} outside 1..{self.p}")
        if self.costs is not None:
            self.costs = np.asarray(self.costs, dtype=float)
            if self.costs.shape != (self.p,) or np.any(self.costs < 0):
                raise PlacementError("costs must be a nonnegative vector of length p")
            if self.weight < 0:
                raise PlacementError("cost weight must be nonnegative")

    @property
    def p(self) -> int:
        return self.gramians.p

    def value(self, sel: SensorSelection) -> float:
        """Objective in the reported scale (trace or geometric-mean determinant)."""
        return self.gramians.metric(self.metric, sel)


@dataclass
class PlacementResult:
    """``value`` is the maximized metric; ``kappa = -value`` is the minimized form."""

    selection: SensorSelection
    value: float
    node_count: int = 0
    status: str = "optimal"
    contributions: np.ndarray | None = field(default=None, repr=False)

    @property
    def gamma(self) -> np.ndarray:
        return self.selection.gamma

    @property
    def kappa(self) -> float:
        return -self.value


def _top_r(scores: np.ndarray, r: int) -> np.ndarray:
    # stable: larger score first, lower index wins ties
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:r])


def solve_trace_exact(prob: PlacementProblem) -> PlacementResult:
    """The ``r`` largest trace contributions (exact by modularity)."""
    if prob.metric != "trace":
        raise PlacementError("solve_trace_exact needs the trace metric")
    t = prob.gramians.trace_contributions()
    sel = SensorSelection.from_indices(prob.p, _top_r(t, prob.r))
    return PlacementResult(sel, float(t[sel.gamma].sum()), 1, "optimal", t)


def solve_p4(prob: PlacementProblem) -> PlacementResult:
    """Maximize ``trace - weight * cost`` with ``sum gamma = r`` by sorting.

    ``value`` is the penalized objective; the plain trace of the selection is
    available through ``prob.gramians.trace``.
    """
    if prob.metric != "trace":
        raise PlacementError("sensor costs are only supported with the trace metric")
    t = prob.gramians.trace_contributions()
    c = np.zeros(prob.p) if prob.costs is None else prob.costs
    score = t - prob.weight * c
    sel = SensorSelection.from_indices(prob.p, _top_r(score, prob.r))
    return PlacementResult(sel, float(score[sel.gamma].sum()), 1, "optimal", score)


# --------------------------------------------------------------------------
# exhaustive oracle


def exhaustive(prob: PlacementProblem, limit: int = 1_000_000, chunk: int = 1024) -> PlacementResult:
    """Enumerate every size-``r`` subset (lexicographic; first maximum wins)."""
    p, r = prob.p, prob.r
    total = math.comb(p, r)
    if total > limit:
        raise PlacementError(f"C({p},{r}) = {total} exceeds the enumeration limit {limit}")
    n = prob.gramians.n
    t = prob.gramians.trace_contributions()
    factors = prob.gramians.factors
    best_val, best = -np.inf, None
    combos = itertools.combinations(range(p), r)
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        idx = np.asarray(block)
        if prob.metric == "trace":
            vals = t[idx].sum(axis=1)
        else:
            vals = stacked_logdet(factors[idx].reshape(len(block), r * n, n))
        j = int(np.argmax(vals))
        if vals[j] > best_val or best is None:
            best_val, best = vals[j], block[j]
    sel = SensorSelection.from_indices(p, best)
    return PlacementResult(sel, prob.value(sel), total, "optimal")


# --------------------------------------------------------------------------
# relaxation


def project_capped_simplex(y: np.ndarray, r: float, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{lo <= x <= hi, sum x = r}``.

    The projection is ``clip(y - tau, lo, hi)``; the total is piecewise linear
    in ``tau`` with kinks at ``y - hi`` and ``y - lo``, so ``tau`` is found
    exactly by evaluating all kinks and interpolating.
    """
    if lo.sum() - 1e-12 > r or hi.sum() + 1e-12 < r:
        raise PlacementError("empty capped simplex")
    kinks = np.unique(np.concatenate([y - hi, y - lo]))
    totals = np.clip(y[None, :] - kinks[:, None], lo, hi).sum(axis=1)   # nonincreasing
    k = int(np.searchsorted(-totals, -r, side="left"))
    if k == 0:
        tau = kinks[0]
    elif k >= kinks.size:
        tau = kinks[-1]
    else:
        f0, f1 = totals[k - 1], totals[k]
        t0, t1 = kinks[k - 1], kinks[k]
        tau = t0 if f0 == f1 else t0 + (f0 - r) / (f0 - f1) * (t1 - t0)
    return np.clip(y - tau, lo, hi)


def _linear_max(grad: np.ndarray, r: int, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Vertex of the capped simplex maximizing ``grad . s`` (binary lo/hi)."""
    s = lo.copy()
    free = np.flatnonzero(hi > lo)
    need = int(round(r - lo.sum()))
    if need > 0:
        pick = free[_top_r(grad[free], need)]
        s[pick] = 1.0
    return s


class _LogDet:
    """``phi(gamma) = log det(sum gamma_i W_i)`` and its gradient, from factors."""

    def __init__(self, factors: np.ndarray, terms: np.ndarray):
        self.factors = factors
        self.terms = terms
        self.p, self.n = factors.shape[0], factors.shape[1]
        self._flat = factors.reshape(-1, self.n)
        self._terms_flat = terms.reshape(self.p, -1)

    def _stack(self, gamma):
        idx = np.flatnonzero(gamma > 0)
        return (np.sqrt(gamma[idx])[:, None, None] * self.factors[idx]).reshape(-1, self.n)

    def value(self, gamma):
        F = self._stack(np.asarray(gamma, dtype=float))
        return float(stacked_logdet(F)) if F.size else -np.inf

    def value_grad(self, gamma):
        # Cholesky of the assembled matrix is fast; the QR route on the
        # stacked factors is the accurate fallback for ill-conditioned nodes
        M = np.tensordot(gamma, self.terms, axes=1)
        try:
            c = np.linalg.cholesky(M)
            d = np.diag(c)
            if d.min() > 1e-7 * d.max():
                ci = solve_triangular(c, np.eye(self.n), lower=True)
                grad = self._terms_flat @ (ci.T @ ci).ravel()
                return 2.0 * float(np.log(d).sum()), grad
        except np.linalg.LinAlgError:
            pass
        F = self._stack(gamma)
        if F.shape[0] < self.n:
            return -np.inf, None
        R = np.linalg.qr(F, mode="r")
        d = np.abs(np.diag(R))
        if d.min() <= 1e-300:
            return -np.inf, None
        Rinv = solve_triangular(R, np.eye(self.n))
        grad = np.square(self._flat @ Rinv).reshape(self.p, -1).sum(axis=1)
        return 2.0 * float(np.log(d).sum()), grad


def relax_bound(phi: _LogDet, r: int, lo: np.ndarray, hi: np.ndarray, start=None,
                incumbent: float = -np.inf, tol: float = 1e-8, max_iter: int = 500):
    """Upper bound of log det over a capped-simplex node.

    Returns ``(bound, gamma)``. Stops early once the bound drops below the
    incumbent (the node can be pruned) or the duality gap is below ``tol``.
    """
    free = hi > lo
    if start is None:
        g = lo.copy()
        if free.any():
            g[free] = (r - lo.sum()) / free.sum()
    else:
        g = project_capped_simplex(np.asarray(start, dtype=float), r, lo, hi)
    val, grad = phi.value_grad(g)
    if grad is None:
        # singular at an interior point of the node: every selection in the
        # node spans a subspace of this matrix's range, so all are singular
        if start is not None:
            return relax_bound(phi, r, lo, hi, None, incumbent, tol, max_iter)
        return -np.inf, g
    step = 1.0 / max(np.abs(grad).max(), 1e-12)
    best_bound = np.inf
    for _ in range(max_iter):
        s = _linear_max(grad, r, lo, hi)
        gap = float(grad @ (s - g))
        best_bound = min(best_bound, val + max(gap, 0.0))
        if best_bound <= incumbent or gap <= tol * max(1.0, abs(val)):
            break
        # projected gradient step with backtracking (Armijo on the projection arc)
        while True:
            cand = project_capped_simplex(g + step * grad, r, lo, hi)
            cval, cgrad = phi.value_grad(cand)
            if cgrad is not None and cval >= val + 1e-4 * grad @ (cand - g):
                break
            step *= 0.5
            if step < 1e-18:
                cgrad = None
                break
        if cgrad is None:
            break
        g, val, grad = cand, cval, cgrad
        step *= 2.0
    return best_bound, g


def _greedy_det(phi: _LogDet, r: int, p: int, base=()) -> list[int]:
    chosen = sorted(int(i) for i in base)
    while len(chosen) < r:
        best, best_v = None, -np.inf
        for i in range(p):
            if i in chosen:
                continue
            g = np.zeros(p)
            g[chosen + [i]] = 1.0
            v = phi.value(g)
            if best is None or v > best_v:
                best, best_v = i, v
        chosen = sorted(chosen + [best])
    return chosen


def solve_bnb(prob: PlacementProblem, node_cap: int = NODE_CAP,
              warm_start: list[SensorSelection] | None = None,
              tol: float = 1e-8) -> PlacementResult:
    """Best-first branch and bound on the chosen metric."""
    p, r = prob.p, prob.r
    if prob.metric == "trace":
        # linear relaxation is integral at its optimum: the root settles it
        res = solve_trace_exact(prob)
        res.node_count = 1
        return res
    if r == p:
        sel = SensorSelection.full(p)
        return PlacementResult(sel, prob.value(sel), 1, "optimal")

    phi = _LogDet(prob.gramians.factors, prob.gramians.terms)

    def leaf_value(idx):
        g = np.zeros(p)
        g[list(idx)] = 1.0
        return phi.value(g)

    inc_idx = tuple(_greedy_det(phi, r, p))
    inc_val = leaf_value(inc_idx)
    for ws in warm_start or []:
        idx = ws.indices.tolist()
        if len(idx) < r:
            idx = _greedy_det(phi, r, p, base=idx)
        elif len(idx) > r:
            continue
        v = leaf_value(idx)
        if v > inc_val or (v == inc_val and tuple(idx) < inc_idx):
            inc_idx, inc_val = tuple(idx), v

    def offer(idx, v):
        nonlocal inc_idx, inc_val
        idx = tuple(sorted(int(i) for i in idx))
        if not np.isfinite(inc_val):
            better, tie = v > inc_val, v == inc_val
        else:
            slack = 1e-12 * max(1.0, abs(inc_val))
            better, tie = v > inc_val + slack, abs(v - inc_val) <= slack
        if better or (tie and idx < inc_idx):
            inc_idx, inc_val = idx, v

    prune_tol = 1e-10
    counter = itertools.count()
    lo0, hi0 = np.zeros(p), np.ones(p)
    bound, gam = relax_bound(phi, r, lo0, hi0, incumbent=-np.inf, tol=tol)
    heap = [(-bound, next(counter), lo0, hi0, gam)]
    nodes = 0
    status = "optimal"
    while heap:
        negb, _, lo, hi, gam = heapq.heappop(heap)
        if -negb <= inc_val + prune_tol:
            continue
        if nodes >= node_cap:
            status = "iteration-capped"
            break
        nodes += 1
        # rounding heuristic
        free = np.flatnonzero(hi > lo)
        need = int(round(r - lo.sum()))
        ones = np.flatnonzero(lo > 0.5)
        if need == 0 or need == free.size:
            idx = ones.tolist() + (free.tolist() if need else [])
            offer(idx, leaf_value(idx))
            continue
        pick = free[_top_r(gam[free], need)]
        cand = ones.tolist() + pick.tolist()
        offer(cand, leaf_value(cand))
        # branch on the most fractional free entry, lowest index on ties
        frac = np.abs(gam[free] - 0.5)
        j = int(free[np.lexsort((free, frac))[0]])
        for val in (1.0, 0.0):
            clo, chi = lo.copy(), hi.copy()
            clo[j] = chi[j] = val
            cfree = np.flatnonzero(chi > clo)
            cneed = int(round(r - clo.sum()))
            if cneed < 0 or cneed > cfree.size:
                continue
            if cneed == 0 or cneed == cfree.size:
                idx = np.flatnonzero(clo > 0.5).tolist() + (cfree.tolist() if cneed else [])
                offer(idx, leaf_value(idx))
                continue
            cb, cg = relax_bound(phi, r, clo, chi, start=gam, incumbent=inc_val + prune_tol, tol=tol)
            cb = min(cb, -negb)
            if cb > inc_val + prune_tol:
                heapq.heappush(heap, (-cb, next(counter), clo, chi, cg))
    sel = SensorSelection.from_indices(p, inc_idx)
    return PlacementResult(sel, prob.value(sel), nodes, status)


def solve(prob: PlacementProblem, **kw) -> PlacementResult:
    """Dispatch: exact sort for trace (with or without costs), BnB for det."""
    if prob.metric == "trace":
        return solve_p4(prob) if prob.costs is not None else solve_trace_exact(prob)
    return solve_bnb(prob, **kw)


# --------------------------------------------------------------------------
# baselines


def baseline_uniform(p: int, r: int) -> SensorSelection:
    """Odd segments 1, 3, 5, ... first, then even ones (1-based numbering)."""
    if not 0 <= r <= p:
        raise PlacementError(f"budget r = {r} outside 0..{p}")
    order = list(range(0, p, 2)) + list(range(1, p, 2))
    return SensorSelection.from_indices(p, order[:r])


def baseline_random(p: int, r: int, seed: int) -> SensorSelection:
    if not 0 <= r <= p:
        raise PlacementError(f"budget r = {r} outside 0..{p}")
    rng = np.random.default_rng(seed)
    return SensorSelection.from_indices(p, np.sort(rng.choice(p, size=r, replace=False)))


def budgets(p: int, percents=range(20, 100, 10)) -> list[int]:
    """``ceil(p * pct / 100)`` for each percentage."""
    return [math.ceil(p * pct / 100 - 1e-12) for pct in percents]


def nested(a: SensorSelection, b: SensorSelection) -> bool:
    return a <= b


__all__ = [
    "PlacementProblem", "PlacementResult", "PlacementError", "solve", "solve_bnb",
    "solve_trace_exact", "solve_p4", "exhaustive", "baseline_uniform", "baseline_random",
    "budgets", "nested", "project_capped_simplex", "relax_bound",
]
