import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actmsense.config import highway_a
from actmsense.model import build_state_space, eval_f, rollout_direct
from actmsense.observability import (EmptyWindowError, SensorGramians, build_Jw, gramian,
                                     jacobian_f, stacked_logdet, step_jacobian,
                                     trace_contributions, transition_jacobians)
from actmsense.selection import SensorSelection
from actmsense.simulator import InputSchedule

from conftest import random_point
from oracles import fd_jacobian, linear_gramian


def _away_from_kinks(ss, x, u, h=1e-5):
    # no atom changes branch inside the finite-difference stencil
    J = jacobian_f(x, u, ss)
    for k in range(ss.n):
        e = np.zeros(ss.n)
        e[k] = h
        if not np.allclose(jacobian_f(x + e, u, ss), J) or not np.allclose(jacobian_f(x - e, u, ss), J):
            return False
    return True


def test_jacobian_f_finite_differences(kernels, hw_a, rng):
    cfg, ss = hw_a
    checked = 0
    while checked < 100:
        x, u = random_point(cfg, rng)
        if not _away_from_kinks(ss, x, u):
            continue
        J = jacobian_f(x, u, ss)
        Jfd = fd_jacobian(lambda z: eval_f(z, u, ss), x, 1e-6)
        err = np.linalg.norm(J - Jfd) / max(np.linalg.norm(Jfd), 1e-300)
        assert err <= 1e-5
        checked += 1


def test_step_jacobian_finite_differences(hw_a, rng):
    cfg, ss = hw_a
    from actmsense.model import step_direct
    for _ in range(20):
        x, u = random_point(cfg, rng)
        if not _away_from_kinks(ss, x, u):
            continue
        Jfd = fd_jacobian(lambda z: step_direct(z, u, cfg), x)
        np.testing.assert_allclose(step_jacobian(x, u, ss), Jfd, atol=1e-7)


def test_kink_has_zero_derivative_contribution(hw11):
    cfg, ss = hw11
    d = cfg.diagram
    x = np.full(cfg.n, 0.02)
    x[3] = d.rho_m - d.capacity / d.w_c   # supply tie w_c(rho_m - x) = v_f rho_c
    u = np.full(cfg.m, 0.3)
    J = jacobian_f(x, u, ss)
    assert np.all(np.isfinite(J))
    const_rows = ss.f_atom < 0
    assert np.all(J[const_rows] == 0)


def test_transition_jacobians_match_rollout_sensitivity(kernels, hw_a, rng):
    cfg, ss = hw_a
    sched = InputSchedule.random(cfg, 10, seed=3)
    for _ in range(5):
        x0, _ = random_point(cfg, rng)
        Phi = transition_jacobians(ss, x0, sched, 6)
        np.testing.assert_array_equal(Phi[0], np.eye(cfg.n))
        for k in range(1, 6):
            fd = fd_jacobian(lambda z: rollout_direct(z, sched.U[:k], cfg)[k], x0, 1e-6)
            assert np.linalg.norm(Phi[k] - fd) / np.linalg.norm(fd) <= 1e-4


def test_linear_transition_is_matrix_power(hw_a):
    cfg, ss = hw_a
    lin = ss.linear()
    Phi = transition_jacobians(lin, np.zeros(cfg.n), InputSchedule.random(cfg, 10, seed=0), 5)
    np.testing.assert_allclose(Phi[4], np.linalg.matrix_power(ss.A, 4), atol=1e-14)


@pytest.mark.parametrize("N", [1, 2, 10, 50])
def test_linear_gramian_reduction(hw_a, N):
    cfg, ss = hw_a
    lin = ss.linear()
    sched = InputSchedule.random(cfg, 60, seed=0)
    sel = SensorSelection.from_indices(cfg.n, [0, 5, 12, 20])
    W = gramian(sel, lin, np.zeros(cfg.n), sched, N).W_o
    np.testing.assert_allclose(W, linear_gramian(ss.A, sel.C_reduced(), N), rtol=0, atol=1e-10)
    full = SensorSelection.full(cfg.n)
    Jw = build_Jw(full, transition_jacobians(lin, np.zeros(cfg.n), sched, N))
    O = np.vstack([np.linalg.matrix_power(ss.A, k) for k in range(N)])
    np.testing.assert_allclose(Jw, O, atol=1e-12)


def test_scalar_linear_gramian():
    A, C = np.array([[0.5]]), np.array([[1.0]])
    assert linear_gramian(A, C, 3)[0, 0] == pytest.approx(1.3125)


def test_empty_selection_and_window(hw_a):
    cfg, ss = hw_a
    sched = InputSchedule.random(cfg, 20, seed=0)
    res = gramian(SensorSelection.empty(cfg.n), ss, np.full(cfg.n, 0.05), sched, 10)
    assert np.all(res.W_o == 0) and res.trace_value == 0 and res.geomean_det == 0
    with pytest.raises(EmptyWindowError):
        transition_jacobians(ss, np.zeros(cfg.n), sched, 0)


def test_sensor_gramians_consistent_with_direct(hw_a, rng):
    cfg, ss = hw_a
    sched = InputSchedule.random(cfg, 100, seed=5)
    x0, _ = random_point(cfg, rng)
    gr = SensorGramians.compute(ss, x0, sched, 60)
    for idx in ([0, 3, 7, 11, 15, 20], list(range(21)), [2, 9]):
        sel = SensorSelection.from_indices(cfg.n, idx)
        direct = gramian(sel, ss, x0, sched, 60)
        np.testing.assert_allclose(gr.matrix(sel), direct.W_o, rtol=1e-10, atol=1e-12)
        assert gr.trace(sel) == pytest.approx(direct.trace_value, rel=1e-12)
        assert gr.geomean_det(sel) == pytest.approx(direct.geomean_det, rel=1e-8, abs=1e-300)
    t = trace_contributions(ss, x0, sched, 60)
    assert np.all(t >= 0)
    assert t.sum() == pytest.approx(gr.trace(SensorSelection.full(cfg.n)), rel=1e-12)
    for i in (0, 10):
        assert t[i] == pytest.approx(gr.trace(SensorSelection.from_indices(cfg.n, [i])), rel=1e-12)


def test_stacked_logdet_against_slogdet(rng):
    F = rng.standard_normal((30, 6))
    assert stacked_logdet(F) == pytest.approx(np.linalg.slogdet(F.T @ F)[1], rel=1e-12)
    assert stacked_logdet(F[:4]) == -np.inf


_CFG = highway_a()
_SS = build_state_space(_CFG)
_SCHED = InputSchedule.random(_CFG, 250, seed=9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.lists(st.booleans(), min_size=21, max_size=21),
       st.lists(st.booleans(), min_size=21, max_size=21))
def test_gramian_psd_and_monotone(seed, g1, g2):
    r = np.random.default_rng(seed)
    x0, _ = random_point(_CFG, r)
    gr = SensorGramians.compute(_SS, x0, _SCHED, 40)
    a = np.array(g1)
    b = a | np.array(g2)
    Wa, Wb = gr.matrix(a.astype(float)), gr.matrix(b.astype(float))
    assert np.max(np.abs(Wb - Wb.T)) <= 1e-12
    scale = max(1.0, np.abs(Wb).max())
    assert np.linalg.eigvalsh(Wb).min() >= -1e-10 * scale
    assert np.linalg.eigvalsh(Wb - Wa).min() >= -1e-10 * scale
    assert gr.trace(b) >= gr.trace(a) - 1e-12
    assert gr.geomean_det(b) >= gr.geomean_det(a) * (1 - 1e-9)
    # disjoint additivity of the trace
    c = ~a
    assert gr.trace(a) + gr.trace(c) == pytest.approx(gr.trace(np.ones(21)), rel=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 200))
def test_window_monotonicity(seed, N):
    r = np.random.default_rng(seed)
    x0, _ = random_point(_CFG, r)
    sel = SensorSelection.from_indices(21, r.choice(21, size=9, replace=False))
    small = SensorGramians.compute(_SS, x0, _SCHED, N)
    big = SensorGramians.compute(_SS, x0, _SCHED, N + 25)
    assert big.trace(sel) >= small.trace(sel) * (1 - 1e-12)
    assert big.geomean_det(sel) >= small.geomean_det(sel) * (1 - 1e-9)
