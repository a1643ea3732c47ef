import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capsim import path as pth


def _brute_nearest(sp, q, n=100_001):
    s = np.linspace(0, 1, n)
    d = np.linalg.norm(sp(s) - q, axis=1)
    return s[np.argmin(d)], d.min()


def test_two_points_straight():
    sp = pth.build_spline([[0, 0, 0], [1, 0, 0]])
    assert np.allclose(sp(0.5), [0.5, 0, 0], atol=1e-12)
    assert sp.length == pytest.approx(1.0, rel=1e-9)


def test_interpolates_key_points_at_knots():
    pts = np.array([[0, 0, 0], [0.1, 0.02, 0], [0.2, 0.0, 0.01], [0.25, -0.05, 0.0]])
    sp = pth.build_spline(pts)
    assert np.allclose(sp(sp.knots), pts, atol=1e-12)
    # chord-length knots
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.allclose(sp.knots, np.concatenate([[0], np.cumsum(chords)]) / chords.sum())


def test_c2_at_interior_knots():
    pts = np.array([[0, 0, 0], [0.1, 0.02, 0], [0.2, 0.0, 0.01], [0.25, -0.05, 0.0]])
    sp = pth.build_spline(pts)
    h = 1e-9
    for k in sp.knots[1:-1]:
        assert np.allclose(sp.derivative(k - h), sp.derivative(k + h), atol=1e-6)
        assert np.allclose(sp.second_derivative(k - h), sp.second_derivative(k + h), atol=1e-5)


def test_duplicate_points_rejected():
    with pytest.raises(pth.DuplicateConsecutivePoints):
        pth.build_spline([[0, 0, 0], [0, 0, 0], [1, 0, 0]])
    with pytest.raises(ValueError):
        pth.build_spline([[0, 0, 0]])


def test_nearest_point_straight_projection():
    sp = pth.build_spline([[0, 0, 0], [1, 0, 0]])
    rp = sp and pth.nearest_point(sp, [0.5, 0.01, 0])
    assert rp.s == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(rp.p_d, [0.5, 0, 0], atol=1e-12)
    assert np.allclose(rp.tangent, [1, 0, 0])


def test_nearest_point_clamps_past_end():
    sp = pth.build_spline([[0, 0, 0], [1, 0, 0]])
    assert pth.nearest_point(sp, [1.5, 0.2, 0]).s == 1.0
    assert pth.nearest_point(sp, [-0.5, 0.2, 0]).s == 0.0


def test_nearest_point_u_shape_tie_goes_to_smaller_s():
    # symmetric U: the point between the two legs is equidistant from both
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [0.12, 0.02, 0], [0.1, 0.04, 0], [0, 0.04, 0]])
    sp = pth.build_spline(pts)
    q = np.array([0.0, 0.02, 0.0])
    rp = pth.nearest_point(sp, q)
    s_bf, d_bf = _brute_nearest(sp, q)
    assert np.linalg.norm(rp.p_d - q) <= d_bf + 1e-6
    assert rp.s < 0.5


def test_nearest_point_matches_brute_force_on_serpentine():
    sp = pth.preset_path("complex")
    rng = np.random.default_rng(0)
    lo, hi = sp.grid_p.min(0) - 0.01, sp.grid_p.max(0) + 0.01
    for q in rng.uniform(lo, hi, size=(40, 3)):
        rp = pth.nearest_point(sp, q)
        _, d_bf = _brute_nearest(sp, q)
        assert np.linalg.norm(rp.p_d - q) <= d_bf + 1e-9


def test_nearest_point_monotone_along_forward_motion():
    sp = pth.preset_path("bent")
    s_prev = 0.0
    for s in np.linspace(0, 1, 400):
        q = sp(s) + np.array([0, 0, 0.001])
        s_star = pth.nearest_point(sp, q).s
        assert s_star >= s_prev - 1e-12
        s_prev = s_star


def test_desired_velocity():
    v = pth.desired_velocity(None, [1, 0, 0], 0.003)
    assert np.allclose(v, [0.003, 0, 0])
    assert np.linalg.norm(pth.desired_velocity(None, [0.6, 0.8, 0], 0.005)) == pytest.approx(0.005)
    with pytest.raises(ValueError):
        pth.desired_velocity(None, [1, 0, 0], 0.0)


def test_reference_sequence_straight_spacing():
    sp = pth.build_spline([[0, 0, 0], [0.2, 0, 0]])
    w = pth.reference_sequence(sp, [0.01, 0.001, 0], N=10, V_c=0.003, f_c=10)
    P = w.positions
    assert len(w.points) == 11
    assert np.allclose(P[:, 1:], 0, atol=1e-12)
    assert np.allclose(np.diff(P[:, 0]), 3e-4, atol=1e-9)
    assert np.allclose(np.linalg.norm(w.velocities, axis=1), 0.003)
    assert w.states.shape == (11, 6)


def test_reference_sequence_base_cases():
    sp = pth.preset_path("bent")
    p = sp(0.3)
    w = pth.reference_sequence(sp, p, N=1, V_c=0.003, f_c=10)
    assert len(w.points) == 2
    assert np.allclose(w.points[0].p_d, p, atol=1e-12)
    with pytest.raises(ValueError):
        pth.reference_sequence(sp, p, N=0, V_c=0.003, f_c=10)


@pytest.mark.parametrize("name, length", [
    ("straight", 0.215), ("bent", 0.244), ("complex", 0.684), ("intestine", 2.46),
    ("intestine_short", 0.30), ("slope", 0.05),
])
def test_preset_lengths(name, length):
    assert pth.preset_path(name).length == pytest.approx(length, rel=1e-3)


def test_slope_preset_is_thirty_degrees():
    sp = pth.preset_path("slope")
    t = sp.tangent(0.5)
    assert np.degrees(np.arcsin(t[2])) == pytest.approx(30.0, abs=1e-9)


def test_unknown_preset():
    with pytest.raises(KeyError):
        pth.preset_path("nope")


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.05, 0.3), st.floats(-0.05, 0.08), st.floats(-0.02, 0.02))
def test_nearest_point_property_intestine_short(x, y, z):
    sp = pth.preset_path("intestine_short")
    q = np.array([x, y, z])
    rp = pth.nearest_point(sp, q)
    _, d_bf = _brute_nearest(sp, q, 20_001)
    assert np.linalg.norm(rp.p_d - q) <= d_bf + 1e-9
    assert abs(np.linalg.norm(rp.tangent) - 1) < 1e-12
