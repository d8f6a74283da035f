import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from actmsense.config import HighwayConfig, RampParams
from actmsense.model import eval_f
from actmsense.observer import (ObserverRun, SynthesisFailed, assemble_p2, bound_check,
                                kalman_gain, lipschitz_constant, lyapunov_values,
                                model_mismatch_variance,
                                necessary_condition, rmse, run_observer, synthesize,
                                verify_unscaled, _from_sdp)
from actmsense.sdp import INFEASIBLE, solve_sdp
from actmsense.selection import SensorSelection
from actmsense.simulator import InputSchedule, NoiseModel, rollout

from conftest import random_point
from oracles import lipschitz_closed_form


def _oracle_gamma(cfg):
    t, d = cfg.topology, cfg.diagram
    beta = {i: cfg.beta(i) for i in t.offramps}
    xi = {i: cfg.xi(i) for i in t.onramps}
    return lipschitz_closed_form(d.v_f, d.w_c, t.l, t.N, t.onramps, t.offramps, beta, xi)


# -- Lipschitz constant ------------------------------------------------------------

@pytest.mark.parametrize("name", ["hw_a", "hw_b", "hw11"])
def test_lipschitz_matches_closed_form(name, request):
    cfg, _ = request.getfixturevalue(name)
    cert = lipschitz_constant(cfg)
    assert cert.gamma_l == pytest.approx(_oracle_gamma(cfg), rel=1e-12)
    assert len(cert.coefficients) == cfg.n
    assert np.sqrt(np.sum(np.square(cert.coefficients))) == pytest.approx(cert.gamma_l)


def test_lipschitz_scales_inverse_length(hw_a):
    cfg, _ = hw_a
    g1 = lipschitz_constant(cfg).gamma_l
    g2 = lipschitz_constant(cfg.with_length(2 * cfg.topology.l)).gamma_l
    assert g2 == pytest.approx(g1 / 2, rel=1e-12)


@pytest.mark.parametrize("name", ["hw_a", "hw11"])
def test_lipschitz_sampled_pairs(name, request, rng):
    cfg, ss = request.getfixturevalue(name)
    gamma = lipschitz_constant(cfg).gamma_l
    worst = 0.0
    for k in range(4000):
        x, u = random_point(cfg, rng)
        if k % 2:
            # nearby pairs probe local slopes
            lo, hi = cfg.state_bounds()
            xh = np.clip(x + rng.normal(0, 1e-3, cfg.n), lo, hi)
        else:
            xh, _ = random_point(cfg, rng)
        dx = np.linalg.norm(x - xh)
        if dx == 0:
            continue
        worst = max(worst, np.linalg.norm(eval_f(x, u, ss) - eval_f(xh, u, ss)) / dx)
    assert worst <= gamma


def test_lipschitz_rejects_bad_params(hw11):
    cfg, _ = hw11
    i = cfg.topology.offramps[0]
    with pytest.raises(ValueError):
        lipschitz_constant(HighwayConfig(cfg.diagram, cfg.topology, RampParams(
            beta={**cfg.ramps.beta, i: 1.0}, xi=cfg.ramps.xi)))


# -- necessary condition -------------------------------------------------------------

def test_necessary_condition_on_case_studies(hw_a, hw11):
    for cfg, ss in (hw_a, hw11):
        gl = lipschitz_constant(cfg).gamma_l
        ok, value = necessary_condition(ss.G, gl, 0.1)
        assert not ok
        assert value == pytest.approx(gl * np.linalg.norm(ss.G, 2))
    assert necessary_condition(np.zeros((3, 2)), 5.0, 0.1) == (True, 0.0)
    assert necessary_condition(np.eye(2), 0.5, 0.1)[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9))
def test_necessary_condition_is_necessary(seed, alpha):
    """Any point satisfying the two diagonal blocks obeys the bound."""
    rng = np.random.default_rng(seed)
    n, g = 2, 2
    G = rng.normal(size=(n, g))
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    # largest eps allowed by G^T P G <= eps I is its top eigenvalue; the other
    # block then caps gamma_l
    eps = np.linalg.eigvalsh(G.T @ P @ G)[-1]
    gamma_max = np.sqrt((1 - alpha) * np.linalg.eigvalsh(P)[0] / eps)
    _, value = necessary_condition(G, gamma_max, alpha)
    assert value <= np.sqrt(1 - alpha) * (1 + 1e-9)


def test_synthesis_precheck_reports_all_alphas(hw11):
    cfg, ss = hw11
    sel = SensorSelection.from_indices(ss.n, range(0, ss.n, 2))
    with pytest.raises(SynthesisFailed) as exc:
        synthesize(ss, sel, NoiseModel.standard(ss, sel))
    attempts = exc.value.attempts
    assert [a["alpha"] for a in attempts] == [0.1, 0.05, 0.2, 0.4]
    assert all(a["status"] == INFEASIBLE for a in attempts)


def test_solver_agrees_with_necessary_condition():
    """Without the precheck the solver itself detects the violated instance."""
    A = np.array([[0.9, 0.2], [0.0, 0.8]])
    G = np.eye(2)
    C = np.array([[1.0, 0.0]])
    Bw, Dw = np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([[0, 0, 1.0]])
    assert not necessary_condition(G, 2.0, 0.1)[0]
    res = solve_sdp(assemble_p2(A, G, C, 2.0, 0.1, 1e4, 0.01 * np.eye(2), Bw, Dw))
    assert res.status == INFEASIBLE
    assert res.certificate is not None


# -- synthesis on small certified instances -------------------------------------------

def _lip2():
    A = np.array([[0.9, 0.2], [0.0, 0.8]])
    G = 0.1 * np.eye(2)
    C = np.array([[1.0, 0.0]])
    Bw = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    Dw = np.array([[0, 0, 1.0]])
    return A, G, C, 0.5, Bw, Dw


def _independent_blocks(A, G, C, gl, alpha, mu1, Z, Bw, Dw, s):
    """The two LMIs written out from their definitions, unnormalized."""
    P, Y = s.P, s.Y
    n, g, q = A.shape[0], G.shape[1], Bw.shape[1]
    M = P @ A - Y @ C
    W = P @ Bw - Y @ Dw
    top = np.zeros((n + g + q, n + g + q))
    top[:n, :n] = (alpha - 1) * P + s.eps * gl ** 2 * np.eye(n)
    top[n:n + g, n:n + g] = -s.eps * np.eye(g)
    top[n + g:, n + g:] = -alpha * s.mu0 * np.eye(q)
    col = np.hstack([M, P @ G, W])
    F1 = np.block([[top, col.T], [col, -P]])
    nz = Z.shape[0]
    F2 = np.zeros((n + q + nz,) * 2)
    F2[:n, :n] = -P
    F2[n:n + q, n:n + q] = -s.mu2 * np.eye(q)
    F2[n + q:, n + q:] = -mu1 * np.eye(nz)
    F2[:n, n + q:] = Z.T
    F2[n + q:, :n] = Z
    return F1, F2


def test_scalar_linear_synthesis():
    A, C = np.array([[0.5]]), np.array([[1.0]])
    Bw, Dw = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    Z = 0.01 * np.eye(1)
    prob = assemble_p2(A, np.zeros((1, 0)), C, 0.0, 0.1, 1e4, Z, Bw, Dw)
    syn = _from_sdp(prob, solve_sdp(prob))
    assert syn is not None and syn.status == "optimal"
    assert abs(A[0, 0] - syn.L[0, 0] * C[0, 0]) < 1
    assert np.all(verify_unscaled(syn, prob) <= 1e-7)
    assert np.isfinite(syn.mu) and syn.mu > 0


def test_lipschitz_synthesis_certificate():
    A, G, C, gl, Bw, Dw = _lip2()
    Z = 0.01 * np.eye(2)
    prob = assemble_p2(A, G, C, gl, 0.1, 1e4, Z, Bw, Dw)
    syn = _from_sdp(prob, solve_sdp(prob))
    assert syn is not None
    for F in _independent_blocks(A, G, C, gl, 0.1, 1e4, Z, Bw, Dw, syn):
        assert np.linalg.eigvalsh(0.5 * (F + F.T))[-1] <= 1e-7
    assert np.linalg.eigvalsh(syn.P)[0] > 0
    assert np.max(np.abs(np.linalg.eigvals(A - syn.L @ C))) < 1


def _solve_lip2(mu1, Z):
    A, G, C, gl, Bw, Dw = _lip2()
    prob = assemble_p2(A, G, C, gl, 0.1, mu1, Z, Bw, Dw)
    return _from_sdp(prob, solve_sdp(prob))


def test_mu_scales_with_performance_output():
    s1 = _solve_lip2(1e4, 0.01 * np.eye(2))
    s2 = _solve_lip2(1.0, np.eye(2))
    assert s2.mu == pytest.approx(100 * s1.mu, rel=1e-4)
    np.testing.assert_allclose(s1.L, s2.L, atol=1e-5)


@pytest.fixture(scope="module")
def lip2_syn():
    return _solve_lip2(1e4, 0.01 * np.eye(2))


def _phi(x, gl):
    # componentwise gl * sin is gl-Lipschitz in the Euclidean norm
    return gl * np.sin(x)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_lyapunov_decrease_noiseless(lip2_syn, vals):
    A, G, C, gl, _, _ = _lip2()
    s = lip2_syn
    x, xh = np.array(vals[:2]), np.array(vals[2:])
    for _ in range(20):
        e = x - xh
        V = e @ s.P @ e
        x_next = A @ x + G @ _phi(x, gl)
        xh_next = A @ xh + G @ _phi(xh, gl) + s.L @ (C @ x - C @ xh)
        e2 = x_next - xh_next
        assert e2 @ s.P @ e2 <= (1 - s.alpha) * V + 1e-12
        x, xh = x_next, xh_next


def test_performance_bound_bounded_noise(lip2_syn):
    A, G, C, gl, Bw, Dw = _lip2()
    s = lip2_syn
    rng = np.random.default_rng(3)
    w = rng.uniform(-1e-2, 1e-2, size=(3000, 3))
    x, xh = np.array([2.0, -1.0]), np.zeros(2)
    z = []
    for k in range(3000):
        y = C @ x + Dw @ w[k]
        x, xh = (A @ x + G @ _phi(x, gl) + Bw @ w[k],
                 A @ xh + G @ _phi(xh, gl) + s.L @ (y - C @ xh))
        z.append(np.linalg.norm(s.Z @ (x - xh)))
    peak = max(z[2000:])
    assert peak <= s.mu * np.linalg.norm(w, axis=1).max()


# -- observer rollout and metrics --------------------------------------------------------

def test_run_observer_exact_start_has_zero_error(hw11):
    cfg, ss = hw11
    sel = SensorSelection.from_indices(ss.n, [0, 3, 7])
    rng = np.random.default_rng(0)
    x0, _ = random_point(cfg, rng)
    sched = InputSchedule.random(cfg, 200, seed=1)
    traj = rollout(x0, sched, 200, cfg, selection=sel)
    L = kalman_gain(ss, sel, NoiseModel.standard(ss, sel))
    run = run_observer(L, traj, sel, cfg, x0)
    assert np.max(np.abs(run.errors)) <= 1e-12
    assert isinstance(run, ObserverRun)
    with pytest.raises(ValueError):
        run_observer(np.zeros((ss.n, 2)), traj, sel, cfg, x0)


def test_run_observer_zero_gain_is_open_loop(hw11):
    cfg, ss = hw11
    sel = SensorSelection.from_indices(ss.n, [0])
    rng = np.random.default_rng(1)
    x0, _ = random_point(cfg, rng)
    xh0, _ = random_point(cfg, rng)
    sched = InputSchedule.random(cfg, 50, seed=2)
    traj = rollout(x0, sched, 50, cfg, selection=sel)
    run = run_observer(np.zeros((ss.n, 1)), traj, sel, cfg, xh0)
    open_loop = rollout(xh0, sched, 50, cfg, selection=sel)
    np.testing.assert_allclose(run.estimates, open_loop.states, atol=1e-12)


def test_rmse_examples():
    assert rmse(np.zeros((10, 3))) == 0.0
    assert rmse(np.full((7, 1), -0.3)) == pytest.approx(0.3)
    assert rmse(np.full((5, 2), 0.3)) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        rmse(np.zeros((0, 2)))


def test_bound_check_and_lyapunov_values():
    z = np.array([5.0, 4.0, 3.0, 0.1, 0.2, 0.1, 0.2, 0.1])
    run = ObserverRun(estimates=np.zeros((8, 1)), errors=z[:, None], z_norms=z)
    w = np.full((7, 2), 0.1)
    holds, peak, level = bound_check(run, mu=2.0, w=w, tail=0.5)
    assert holds and peak == 0.2 and level == pytest.approx(2.0 * np.sqrt(0.02))
    assert not bound_check(run, mu=0.5, w=w, tail=0.5)[0]
    np.testing.assert_allclose(lyapunov_values(run, np.array([[2.0]])), 2 * z ** 2)


def _riccati_iteration(A, C, Q, R, S, iters=20000):
    Sig = np.eye(A.shape[0])
    for _ in range(iters):
        K = (A @ Sig @ C.T + S) @ np.linalg.inv(C @ Sig @ C.T + R)
        new = A @ Sig @ A.T + Q - K @ (A @ Sig @ C.T + S).T
        if np.max(np.abs(new - Sig)) < 1e-15:
            break
        Sig = new
    return (A @ Sig @ C.T + S) @ np.linalg.inv(C @ Sig @ C.T + R)


def test_kalman_gain_matches_riccati_iteration(hw11):
    cfg, ss = hw11
    sel = SensorSelection.from_indices(ss.n, [0, 4, 8, 10])
    noise = NoiseModel.standard(ss, sel, q_var=1e-3, r_var=5e-3)
    C = sel.C_reduced()
    cov = noise.covariance
    Q = noise.B_w @ cov @ noise.B_w.T
    R = noise.D_w @ cov @ noise.D_w.T
    S = noise.B_w @ cov @ noise.D_w.T
    for extra in (0.0, model_mismatch_variance(cfg)):
        K = kalman_gain(ss, sel, noise, state_var=extra)
        Kr = _riccati_iteration(ss.A, C, Q + extra * np.eye(ss.n), R, S)
        np.testing.assert_allclose(K, Kr, atol=1e-8)
    assert np.max(np.abs(np.linalg.eigvals(ss.A - K @ C))) < 1


def test_model_mismatch_variance(hw_a):
    cfg, _ = hw_a
    d, t = cfg.diagram, cfg.topology
    assert model_mismatch_variance(cfg) == pytest.approx((t.T * d.v_f * d.rho_c / t.l) ** 2)
    assert model_mismatch_variance(cfg.with_length(800.0)) == pytest.approx(
        model_mismatch_variance(cfg) / 4)
