import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capsim import control as ctl
from capsim._kernels import rollout_sensitivities, tracking_cost_grad
from capsim.control import AdaptiveState, Gains, MpcConfig, ScenarioSet
from capsim.environment import CapsuleState, PhysicalParams, step_dynamics
from capsim.path import preset_path, reference_sequence

P = PhysicalParams()


def _moving_state(p=(0.001, 0.0005, 0.0), v=(0.002, 0.0003, 0.0)):
    v = np.array(v, float)
    return CapsuleState(np.array(p, float), v, v / np.linalg.norm(v))


def _window(state, N=10):
    return reference_sequence(preset_path("intestine_short"), state.p, N, 0.003, 10)


# --- reactive laws ----------------------------------------------------------------

def test_pd_feedforward_example():
    s = CapsuleState(np.zeros(3), np.array([0.003, 0, 0]), np.array([1.0, 0, 0]))
    f = ctl.pd_force(np.zeros(3), np.zeros(3), s, P, Gains(2 * np.eye(3), 4 * np.eye(3)), 0.05)
    assert np.allclose(f, [0.05, 0, 0.0981], atol=1e-15)


def test_pd_linear_term_and_null_case():
    s = CapsuleState.at_rest(np.zeros(3))
    p0 = PhysicalParams(g=0.0)
    g = Gains(2 * np.eye(3), 1e-9 * np.eye(3))
    assert np.allclose(ctl.pd_force([0.001, 0, 0], np.zeros(3), s, p0, g, 0.05), [0.002, 0, 0])
    assert np.allclose(ctl.pd_force(np.zeros(3), np.zeros(3), s, p0, g, 0.0), 0)


def test_gains_must_be_spd():
    with pytest.raises(ValueError):
        Gains(np.zeros((3, 3)), np.eye(3))
    with pytest.raises(ValueError):
        Gains(np.eye(3), np.array([[1, 2, 0], [0, 1, 0], [0, 0, 1.0]]))


def test_ac_zero_accumulator_is_gravity_only():
    s = CapsuleState(np.zeros(3), np.array([0.003, 0, 0]), np.array([1.0, 0, 0]))
    g = Gains()
    f, _ = ctl.ac_force(np.zeros(3), np.zeros(3), s, P, g, AdaptiveState(0.0), 0.1, 0.05)
    assert np.allclose(f, -P.f_g)


def test_ac_single_update_arithmetic():
    s = CapsuleState(np.zeros(3), np.array([0.003, 0, 0]), np.array([1.0, 0, 0]))
    ad = AdaptiveState(0.2, a_max=3.0, gamma=1.0)
    _, new = ctl.ac_force(np.zeros(3), np.array([0.001, 0, 0]), s, P, Gains(), ad, 0.1, 0.05)
    assert new.a == pytest.approx(0.2 - 5e-6, abs=1e-18)


@given(st.floats(-3, 3), st.tuples(*[st.floats(-1, 1)] * 3), st.floats(1, 1e6))
def test_ac_accumulator_clamped(a, edot, gamma):
    s = CapsuleState(np.zeros(3), np.array([0.003, 0, 0]), np.array([1.0, 0, 0]))
    ad = AdaptiveState(a, 3.0, gamma)
    f, new = ctl.ac_force(np.zeros(3), np.array(edot), s, P, Gains(), ad, 0.1, 0.05)
    assert abs(new.a) <= 3.0
    assert np.all(np.isfinite(f))


def test_adaptive_state_validation():
    with pytest.raises(ValueError):
        AdaptiveState(a=5.0, a_max=3.0)


# --- model and kernels -------------------------------------------------------------

def test_predict_state_is_step_dynamics():
    s = _moving_state()
    f = np.array([0.05, 0.01, 0.1])
    a = ctl.predict_state(s, f, 1.5, P, 0.1, 0.05)
    b = step_dynamics(s, f, P, 0.1, 1.5, 0.05)
    assert np.array_equal(a.p, b.p) and np.array_equal(a.v, b.v)


def test_rollout_matches_step_dynamics():
    rng = np.random.default_rng(0)
    s = _moving_state()
    U = -P.f_g + rng.normal(size=(10, 3)) * 0.05
    X, _, _ = ctl._rollout(s.x, U, 1.5 * 0.05, P, 0.1)
    st_ = s
    for i in range(10):
        st_ = step_dynamics(st_, U[i], P, 0.1, 1.5, 0.05)
        assert np.allclose(X[i + 1], st_.x, atol=1e-15)


def test_sensitivity_kernel_matches_numpy_jacobians():
    rng = np.random.default_rng(1)
    s = _moving_state()
    U = np.ascontiguousarray(-P.f_g + rng.normal(size=(6, 3)) * 0.05)
    X_ref, A, B = ctl._rollout(s.x, U, 0.05, P, 0.1)
    X, S = rollout_sensitivities(s.x, U, 0.05, P.m_c, P.f_g[2], 0.1)
    assert np.allclose(X, X_ref, atol=1e-15)
    S_ref = np.zeros((7, 6, 18))
    for i in range(6):
        S_ref[i + 1] = A[i] @ S_ref[i]
        S_ref[i + 1][:, 3 * i:3 * i + 3] += B[i]
    assert np.allclose(S, S_ref, atol=1e-12)
    # and against finite differences of the rollout
    h = 1e-7
    for j in range(18):
        dU = np.zeros(18)
        dU[j] = h
        Xp, _, _ = ctl._rollout(s.x, U + dU.reshape(6, 3), 0.05, P, 0.1)
        Xm, _, _ = ctl._rollout(s.x, U - dU.reshape(6, 3), 0.05, P, 0.1)
        assert np.allclose((Xp - Xm) / (2 * h), S[:, :, j], atol=1e-6)


def test_cost_gradient_kernel_matches_numpy_and_fd():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig()
    U = ctl.feedforward_guess(s, w, cfg, P, 1.2)
    sc = ScenarioSet.mmc()
    cost = ctl._TrackingCost(s.x, w.states, cfg, P, sc.R, sc.w, U[0])
    val, grad = cost(U)
    assert val == pytest.approx(cost.value(U), rel=1e-12)
    r, J = cost.residuals(U)
    assert r @ r == pytest.approx(val, rel=1e-12)
    assert np.allclose(2 * J.T @ r, grad.ravel(), rtol=1e-9, atol=1e-12 * np.abs(grad).max())
    h = 1e-8
    fd = np.zeros(U.size)
    for j in range(U.size):
        d = np.zeros(U.size)
        d[j] = h
        fd[j] = (cost.value(U + d.reshape(U.shape)) - cost.value(U - d.reshape(U.shape))) / (2 * h)
    assert np.allclose(fd, grad.ravel(), rtol=1e-5, atol=1e-6 * np.abs(grad).max())


def test_kernel_cost_matches_direct_sum():
    s = _moving_state()
    w = _window(s, N=4)
    cfg = MpcConfig(N=4)
    U = np.ascontiguousarray(ctl.feedforward_guess(s, w, cfg, P))
    f_prev = U[0] * 0.9
    total, _ = tracking_cost_grad(s.x, U, w.states, cfg.W_x, cfg.W_N, cfg.W_f, f_prev,
                                  np.array([0.05]), np.array([1.0]), P.m_c, P.f_g[2], 0.1)
    X, _, _ = ctl._rollout(s.x, U, 0.05, P, 0.1)
    E = w.states - X
    ref = sum(E[i] @ cfg.W_x @ E[i] for i in range(4)) + E[4] @ cfg.W_N @ E[4]
    D = np.diff(np.vstack([f_prev, U]), axis=0)
    ref += sum(d @ cfg.W_f @ d for d in D)
    assert total == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("R_values, weights", [((1.0,), (1.0,)),
                                                ((1.0, 1.5, 2.0, 1.5), (0.5, 0.225, 0.05, 0.225)),
                                                ((1.0, 40.0), (0.0, 1.0))])
def test_residual_kernel_matches_numpy(R_values, weights):
    s = _moving_state()
    w = _window(s, N=6)
    cfg = MpcConfig(N=6)
    U = ctl.feedforward_guess(s, w, cfg, P)
    cost = ctl._TrackingCost(s.x, w.states, cfg, P, R_values, weights, U[0] * 0.8, scale=3.0)
    r, J = cost.residuals(U)
    r_ref, J_ref = cost.residuals_reference(U)
    assert np.allclose(r, r_ref, rtol=1e-12, atol=1e-15)
    assert np.allclose(J, J_ref, rtol=1e-12, atol=1e-15)
    assert float(r @ r) == pytest.approx(cost.value(U) / 3.0, rel=1e-10)


# --- MPC ---------------------------------------------------------------------------

def test_mpc_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(N=0)
    with pytest.raises(ValueError):
        MpcConfig(W_x=-np.eye(6))
    with pytest.raises(ValueError):
        ScenarioSet((1.0, 2.0), (0.5, 0.6))


def test_scenario_weights_default():
    sc = ScenarioSet.mmc()
    assert sc.R == (1.0, 1.5, 2.0, 1.5)
    assert sc.w == (0.5, 0.225, 0.05, 0.225)


def test_mpc_stationary_optimum_balances_gravity_and_friction():
    sp = preset_path("straight")
    s = CapsuleState(sp(0.2), sp.tangent(0.2) * 0.003, sp.tangent(0.2))
    w = reference_sequence(sp, s.p, 10, 0.003, 10)
    cfg = MpcConfig()
    f_ss = np.array([0.05, 0, 0]) - P.f_g
    U, f_d, obj = ctl.mpc_solve(s, w, cfg, P, f_prev=f_ss)
    assert np.allclose(f_d, f_ss, atol=1e-6)
    assert np.allclose(np.diff(U, axis=0), 0, atol=1e-6)
    assert obj < 1e-9


def test_mpc_force_bounds_respected():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig(f_max=0.08)
    U, f_d, _ = ctl.mpc_solve(s, w, cfg, P)
    assert np.all(np.linalg.norm(U, axis=1) <= 0.08 + 1e-9)
    # gravity alone needs 0.098 N: the bound is active
    assert np.allclose(np.linalg.norm(U, axis=1), 0.08, atol=1e-6)


def test_mpc_objective_not_worse_than_warm_start():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig()
    warm = ctl.feedforward_guess(s, w, cfg, P)
    U, _, obj = ctl.mpc_solve(s, w, cfg, P, warm=warm, f_prev=warm[0])
    c = ctl._TrackingCost(s.x, w.states, cfg, P, (1.0,), (1.0,), warm[0])
    assert obj <= c.value(warm) + 1e-12


def test_mpc_one_step_prediction_exact_in_env1():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig()
    U, f_d, _ = ctl.mpc_solve(s, w, cfg, P)
    X, _, _ = ctl._rollout(s.x, U, 0.05, P, 0.1)
    nxt = step_dynamics(s, f_d, P, 0.1, 1.0, 0.05)
    assert np.allclose(X[1], nxt.x, atol=1e-15)


def test_mpc_weight_scaling_invariance():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig(tol=1e-14)
    k = 37.0
    cfg_k = MpcConfig(W_x=k * cfg.W_x, W_N=k * cfg.W_N, W_f=k * cfg.W_f, tol=1e-14)
    U1, _, _ = ctl.mpc_solve(s, w, cfg, P)
    U2, _, _ = ctl.mpc_solve(s, w, cfg_k, P)
    assert np.allclose(U1, U2, atol=1e-6)


def test_rmmpc_objective_is_weighted_sum():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig()
    sc = ScenarioSet.mmc()
    f_prev = -P.f_g
    U, _, obj = ctl.rmmpc_solve(s, w, cfg, P, sc, f_prev=f_prev)
    per = ctl.scenario_objective(s, w, cfg, P, U, sc.R, sc.w, f_prev)
    c = ctl._TrackingCost(s.x, w.states, cfg, P, sc.R, sc.w, f_prev)
    reg = c.value(U) - sum(wj * cj for wj, cj in zip(sc.w, per))
    assert obj == pytest.approx(sum(wj * cj for wj, cj in zip(sc.w, per)) + reg, rel=1e-8)
    assert obj == pytest.approx(c.value(U), rel=1e-8)


def test_rmmpc_cost_between_pure_scenarios():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig()
    sc = ScenarioSet.mmc()
    U, _, _ = ctl.rmmpc_solve(s, w, cfg, P, sc, f_prev=-P.f_g)
    c1, c15, c2, _ = ctl.scenario_objective(s, w, cfg, P, U, sc.R, sc.w, -P.f_g)
    mixed = sum(wj * cj for wj, cj in zip(sc.w, (c1, c15, c2, c15)))
    assert min(c1, c2) <= mixed <= max(c1, c2)


def test_rmmpc_single_weight_reduces_to_mpc():
    s = _moving_state()
    w = _window(s)
    cfg = MpcConfig(tol=1e-14)
    sc = ScenarioSet((1.0, 1.5, 2.0, 1.5), (1.0, 0.0, 0.0, 0.0))
    _, f_r, _ = ctl.rmmpc_solve(s, w, cfg, P, sc, f_prev=-P.f_g)
    _, f_m, _ = ctl.mpc_solve(s, w, cfg, P, f_prev=-P.f_g)
    assert np.allclose(f_r, f_m, atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 0.25), st.floats(-0.003, 0.003), st.floats(-0.003, 0.003))
def test_controller_outputs_finite(s0, dx, dy):
    sp = preset_path("intestine_short")
    p = sp(s0) + np.array([dx, dy, 0.0])
    st_ = CapsuleState(p, sp.tangent(s0) * 0.002, sp.tangent(s0))
    w = reference_sequence(sp, p, 10, 0.003, 10)
    for solve in (ctl.mpc_solve, ctl.rmmpc_solve):
        U, f, _ = solve(st_, w, MpcConfig(), P)
        assert np.all(np.isfinite(U))


def test_shift_warm_start():
    U = np.arange(12.0).reshape(4, 3)
    V = ctl.shift_warm_start(U)
    assert np.array_equal(V[:3], U[1:]) and np.array_equal(V[3], U[3])
