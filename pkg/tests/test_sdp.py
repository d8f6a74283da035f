import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from actmsense.sdp import (INFEASIBLE, OPTIMAL, SdpDimensionError, SdpProblem, Variable,
                           _psd_project, smat, solve_sdp, svec)


def test_min_x_diag():
    prob = SdpProblem([Variable("x", "scalar")], lambda v: [np.diag([-v["x"], -1.0])],
                      lambda v: v["x"], strict=[False])
    res = solve_sdp(prob)
    assert res.status == OPTIMAL
    assert res.values["x"] == pytest.approx(0.0, abs=1e-6)
    assert res.max_eigs.max() <= 1e-7


def test_max_t():
    prob = SdpProblem([Variable("t", "scalar")], lambda v: [(v["t"] - 1.0) * np.eye(3)],
                      lambda v: -v["t"], strict=[False])
    res = solve_sdp(prob)
    assert res.status == OPTIMAL
    assert res.values["t"] == pytest.approx(1.0, abs=1e-6)


def test_lyapunov_certificate_half_identity():
    A = 0.5 * np.eye(3)
    prob = SdpProblem([Variable("P", "sym", (3, 3))],
                      lambda v: [A.T @ v["P"] @ A - v["P"], np.eye(3) - v["P"]],
                      lambda v: 0.0 * np.trace(v["P"]))
    res = solve_sdp(prob)
    assert res.feasible
    P = res.values["P"]
    assert np.linalg.eigvalsh(A.T @ P @ A - P).max() < 0
    # P = I is the analytic certificate; any returned point must satisfy the constraints
    assert np.linalg.eigvalsh(np.eye(3) - P).max() <= 1e-7


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 5))
def test_min_trace_lyapunov_matches_closed_form(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= 0.8 / max(np.abs(np.linalg.eigvals(A)))
    P_star = sla.solve_discrete_lyapunov(A.T, np.eye(n))      # A^T P A - P + I = 0
    prob = SdpProblem([Variable("P", "sym", (n, n))],
                      lambda v: [A.T @ v["P"] @ A - v["P"] + np.eye(n)],
                      lambda v: np.trace(v["P"]), strict=[False])
    res = solve_sdp(prob)
    assert res.status == OPTIMAL
    assert res.objective == pytest.approx(np.trace(P_star), rel=1e-4)
    np.testing.assert_allclose(res.values["P"], P_star, atol=1e-3 * np.abs(P_star).max())


def test_infeasible_detected():
    prob = SdpProblem([Variable("x", "scalar")],
                      lambda v: [np.array([[v["x"] - 1.0]]), np.array([[2.0 - v["x"]]])],
                      lambda v: v["x"])
    res = solve_sdp(prob)
    assert res.status == INFEASIBLE
    assert not res.feasible
    assert res.certificate is not None and res.certificate[0] > 0


def test_deterministic():
    A = np.array([[0.9, 0.2], [0.0, 0.7]])
    make = lambda: SdpProblem([Variable("P", "sym", (2, 2))],
                              lambda v: [A.T @ v["P"] @ A - v["P"] + np.eye(2)],
                              lambda v: np.trace(v["P"]), strict=[False])
    a, b = solve_sdp(make()), solve_sdp(make())
    assert a.iterations == b.iterations
    np.testing.assert_array_equal(a.z, b.z)


def test_rejects_non_affine_and_non_square():
    with pytest.raises(SdpDimensionError):
        solve_sdp(SdpProblem([Variable("x", "scalar")], lambda v: [np.array([[v["x"] ** 2]])],
                             lambda v: v["x"]))
    with pytest.raises(SdpDimensionError):
        solve_sdp(SdpProblem([Variable("x", "scalar")], lambda v: [np.ones((2, 3)) * v["x"]],
                             lambda v: v["x"]))
    with pytest.raises(SdpDimensionError):
        Variable("x", "tensor").size


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
def test_svec_and_projection(seed, n):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((n, n))
    S = S + S.T
    T = rng.standard_normal((n, n))
    T = T + T.T
    assert svec(S) @ svec(T) == pytest.approx(np.trace(S @ T))
    np.testing.assert_allclose(smat(svec(S), n), S)
    Pj = smat(_psd_project(svec(S), n), n)
    assert np.linalg.eigvalsh(Pj).min() >= -1e-12
    lam, Q = np.linalg.eigh(S)
    np.testing.assert_allclose(Pj, (Q * np.maximum(lam, 0)) @ Q.T, atol=1e-12)
