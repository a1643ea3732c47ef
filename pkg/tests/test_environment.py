import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from capsim import environment as envm
from capsim.environment import CapsuleState, MmcPhase, PhysicalParams

vec3 = st.tuples(*[st.floats(-0.05, 0.05)] * 3).map(np.array)


def test_friction_examples():
    assert np.allclose(envm.friction_force([0.001, 0, 0], 0.05), [-0.05, 0, 0])
    f = envm.friction_force([0.0003, -0.0004, 0.001], 0.05)
    assert np.linalg.norm(f) == pytest.approx(0.05)


def test_stiction_cancels_small_force():
    f_fric = envm.friction_force([0, 0, 0], 0.05, f_other=[0.02, 0, 0])
    assert np.allclose(f_fric, [-0.02, 0, 0])
    f_fric = envm.friction_force([0, 0, 0], 0.05, f_other=[0.2, 0, 0])
    assert np.allclose(f_fric, [-0.05, 0, 0])
    # step: applied 0.02 N at rest without gravity -> no motion
    p = PhysicalParams(g=0.0)
    s = envm.step_dynamics(CapsuleState.at_rest([0, 0, 0]), [0.02, 0, 0], p, 0.1, 1.0, 0.05)
    assert np.allclose(s.v, 0) and np.allclose(s.p, 0)


@pytest.mark.parametrize("phase, R", [(MmcPhase.I, 1.0), (MmcPhase.III, 2.0), (MmcPhase.II, 1.5),
                                      (MmcPhase.IV, 1.5)])
def test_mmc_coefficient(phase, R):
    assert envm.mmc_coefficient(phase, 2.0) == R


def test_mmc_coefficient_validation():
    with pytest.raises(ValueError):
        envm.mmc_coefficient(MmcPhase.I, 0.5)


def test_phase_frequencies():
    rng = np.random.default_rng(0)
    n = 200_000
    counts = {ph: 0 for ph in MmcPhase}
    for _ in range(n):
        counts[envm.sample_phase(rng)] += 1
    for ph, p in envm.PHASE_PROBS.items():
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(counts[ph] / n - p) < 5 * sigma


def test_phase_determinism_and_constant_mode():
    a = [envm.sample_phase(np.random.default_rng(5)) for _ in range(3)]
    b = [envm.sample_phase(np.random.default_rng(5)) for _ in range(3)]
    assert a == b
    env = envm.environment_preset("env1", seed=3)
    assert all(env.sample(t)[0] is MmcPhase.I and env.sample(t)[1] == 1.0 for t in range(50))


def test_slow_varying_range():
    env = envm.environment_preset("env2")
    Rs = [env.sample(t)[1] for t in np.linspace(0, 240, 500)]
    assert min(Rs) == pytest.approx(1.0, abs=1e-3) and max(Rs) == pytest.approx(2.0, abs=1e-3)


def test_disturbance_ball():
    rng = np.random.default_rng(1)
    assert np.allclose(envm.disturbance_sample(rng, 0.0), 0)
    S = np.array([envm.disturbance_sample(rng, 0.005) for _ in range(100_000)])
    assert np.all(np.linalg.norm(S, axis=1) <= 0.005)
    se = S.std(axis=0) / math.sqrt(len(S))
    assert np.all(np.abs(S.mean(axis=0)) < 3 * se + 1e-12)
    # uniform in the ball: P(|x| < r/2) = 1/8
    frac = np.mean(np.linalg.norm(S, axis=1) < 0.0025)
    assert frac == pytest.approx(0.125, abs=0.005)


def test_disturbance_stream_alignment():
    # the draw count does not depend on rho, so later draws stay aligned
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    envm.disturbance_sample(r1, 0.0)
    envm.disturbance_sample(r2, 0.005)
    assert r1.random() == r2.random()


def test_env_force_compositions():
    s = CapsuleState(np.zeros(3), np.array([0.003, 0, 0]), np.array([1.0, 0, 0]))
    assert np.allclose(envm.env_force(s, 1.0, 0.05, np.zeros(3)), [-0.05, 0, 0])
    assert np.allclose(envm.env_force(s, 2.0, 0.05, np.zeros(3)), [-0.1, 0, 0])


@given(vec3, vec3, st.floats(1.0, 2.0), st.floats(0, 0.005))
def test_env_force_bounded(v, f_app, R, rho_dist):
    rng = np.random.default_rng(0)
    s = CapsuleState(np.zeros(3), v, np.array([1.0, 0, 0]))
    fd = envm.disturbance_sample(rng, rho_dist)
    f = envm.env_force(s, R, 0.05, fd, f_app, PhysicalParams(), 0.1)
    assert np.linalg.norm(f) <= 2.0 * 0.05 + 0.005 + 1e-12


def test_step_ballistic():
    p = PhysicalParams(g=0.0)
    s = CapsuleState(np.array([0.1, 0, 0]), np.array([0.01, 0.02, 0]), np.array([1.0, 0, 0]))
    n = envm.step_dynamics(s, np.zeros(3), p, 0.1)
    assert np.allclose(n.p, s.p + s.v * 0.1) and np.allclose(n.v, s.v)


def test_step_gravity_only_drop():
    n = envm.step_dynamics(CapsuleState.at_rest([0, 0, 0]), np.zeros(3), PhysicalParams(), 0.1)
    assert n.p[2] == pytest.approx(-0.04905, abs=1e-15)


def test_constant_force_closed_form():
    p = PhysicalParams(m_c=0.01, g=0.0)
    F = np.array([0.003, -0.001, 0.002])
    s = CapsuleState(np.array([0.0, 0, 0]), np.array([0.001, 0, 0]), np.array([1.0, 0, 0]))
    dt, k = 0.05, 40
    for _ in range(k):
        s = envm.step_dynamics(s, F, p, dt)
    T = dt * k
    a = F / p.m_c
    assert np.allclose(s.p, np.array([0.001, 0, 0]) * T + 0.5 * a * T * T, atol=1e-14)


@given(vec3.filter(lambda v: np.linalg.norm(v) > 0), st.floats(0.0, 0.2))
def test_friction_never_increases_speed(v, rho):
    p = PhysicalParams(g=0.0)
    s = CapsuleState(np.zeros(3), v, v / np.linalg.norm(v))
    n = envm.step_dynamics(s, np.zeros(3), p, 0.1, 1.0, rho)
    assert np.linalg.norm(n.v) <= np.linalg.norm(v) + 1e-15


def test_heading_update_rule():
    s = CapsuleState.at_rest([0, 0, 0], [0, 1, 0])
    n = envm.step_dynamics(s, [0.0, 0, 0], PhysicalParams(g=0.0), 0.1)
    assert np.allclose(n.heading, [0, 1, 0])
    n = envm.step_dynamics(s, [0.01, 0, 0], PhysicalParams(g=0.0), 0.1)
    assert np.allclose(n.heading, [1, 0, 0])


def test_invalid_params():
    with pytest.raises(ValueError):
        PhysicalParams(m_c=0)
    with pytest.raises(ValueError):
        envm.EnvironmentModel(rho_fric=-1)
    with pytest.raises(ValueError):
        envm.EnvironmentModel(phase_probs={MmcPhase.I: 0.7, MmcPhase.II: 0.1, MmcPhase.III: 0.1,
                                           MmcPhase.IV: 0.0})
    with pytest.raises(ValueError):
        envm.step_dynamics(CapsuleState.at_rest([0, 0, 0]), np.zeros(3), PhysicalParams(), 0.0)


def test_environment_seeded_streams_identical():
    a = envm.environment_preset("env4", seed=11)
    b = envm.environment_preset("env4", seed=11)
    for t in range(100):
        pa, Ra, fa = a.sample(t * 0.1)
        pb, Rb, fb = b.sample(t * 0.1)
        assert pa == pb and Ra == Rb and np.array_equal(fa, fb)
