"""Point-dipole magnetics and the reciprocally rotating actuation geometry.

Conventions
-----------
* Angles in the public API are degrees, lengths metres, moments A*m^2.
* ``r`` is always the vector from the actuator magnet to the capsule,
  ``r = p_c - p_a``.
* A heading/rotation axis is stored as :class:`AxisAngles` ``(theta_z, theta_y)``
  with ``w = Rot_z(theta_z) @ Rot_y(-theta_y) @ [1, 0, 0]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numopt import least_squares_bounded
from ._kernels import rrma_force_kernel

MU0 = 4e-7 * math.pi
_K = MU0 / (4.0 * math.pi)  # 1e-7

D_BOUNDS = (0.10, 0.25)
ANGLE_BOUND = 15.0
RANGE_EPS = 1e-6


class DegenerateAxis(ValueError):
    """Axis too close to +/-z for the (theta_z, theta_y) parameterisation."""


class SingularRange(ValueError):
    """Dipole evaluated too close to its source."""


class ZeroVector(ArithmeticError):
    pass


class SolverFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class AxisAngles:
    theta_z: float
    theta_y: float


@dataclass(frozen=True)
class ActuatorConfig:
    d: float
    alpha: float
    beta: float
    theta_ax: float = 180.0

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.alpha, self.beta])

    def in_bounds(self, tol: float = 0.0) -> bool:
        return (D_BOUNDS[0] - tol <= self.d <= D_BOUNDS[1] + tol
                and abs(self.alpha) <= ANGLE_BOUND + tol
                and abs(self.beta) <= ANGLE_BOUND + tol)


def _magnet_moments() -> tuple[float, float]:
    # m = B_r V / mu0; actuator: 50 mm N42 sphere, capsule: 12.8/9 x 15 mm N38SH ring
    v_sphere = 4.0 / 3.0 * math.pi * 0.025 ** 3
    v_ring = math.pi / 4.0 * (0.0128 ** 2 - 0.009 ** 2) * 0.015
    return 1.30 * v_sphere / MU0, 1.26 * v_ring / MU0


DEFAULT_M_A, DEFAULT_M_C = _magnet_moments()


@dataclass(frozen=True)
class MagnetParams:
    m_a: float = DEFAULT_M_A
    m_c: float = DEFAULT_M_C
    theta_ar: float = 45.0

    def __post_init__(self):
        if self.m_a <= 0 or self.m_c <= 0:
            raise ValueError("dipole magnitudes must be positive")
        if not 0.0 < self.theta_ar <= 90.0:
            raise ValueError("theta_ar must lie in (0, 90] degrees")


# --- rotations -----------------------------------------------------------

def rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ZeroVector(f"cannot normalise vector of norm {n:.3e}")
    return v / n


def axis_angles_from_unit(w) -> AxisAngles:
    w = unit(w)
    if abs(w[2]) >= 1.0 - 1e-9:
        raise DegenerateAxis(f"axis {w} is (anti)parallel to z")
    theta_z = math.degrees(math.atan2(w[1], w[0])) % 360.0
    if theta_z >= 360.0:  # -0.0 % 360 edge
        theta_z = 0.0
    return AxisAngles(theta_z, math.degrees(math.asin(w[2])))


def heading_frame(a: AxisAngles) -> np.ndarray:
    """Rotation taking +x onto the axis described by ``a``."""
    return rot_z(a.theta_z) @ rot_y(-a.theta_y)


def unit_from_axis_angles(a: AxisAngles) -> np.ndarray:
    return heading_frame(a)[:, 0].copy()


def actuator_moment(a: AxisAngles, theta_ax: float) -> np.ndarray:
    """Unit actuator moment after rotating ``theta_ax`` about the actuator axis ``a``."""
    return heading_frame(a) @ rot_x(theta_ax) @ np.array([0.0, 0.0, 1.0])


def actuation_axis(w_dc, r_hat) -> np.ndarray:
    """Actuator rotation axis producing a field rotating about ``w_dc`` at the capsule."""
    r_hat = np.asarray(r_hat, dtype=float)
    w_dc = np.asarray(w_dc, dtype=float)
    v = 3.0 * r_hat * (r_hat @ w_dc) - w_dc
    # eigenvalues of (3 r r^T - I) are 2 and -1, so |v| >= 1 for unit input
    assert np.linalg.norm(v) > 1e-12
    return unit(v)


def relative_position(cfg: ActuatorConfig, heading: AxisAngles) -> np.ndarray:
    """``r = p_c - p_a`` for an actuator at distance d with offsets alpha, beta."""
    down = np.array([0.0, 0.0, -1.0])
    return cfg.d * (heading_frame(heading) @ rot_x(cfg.beta) @ rot_y(cfg.alpha) @ down)


def dipole_field(m_vec, r) -> np.ndarray:
    m_vec = np.asarray(m_vec, dtype=float)
    r = np.asarray(r, dtype=float)
    dist = np.linalg.norm(r)
    if dist < RANGE_EPS:
        raise SingularRange(f"|r| = {dist:.3e} m")
    r_hat = r / dist
    return _K / dist ** 3 * (3.0 * r_hat * (r_hat @ m_vec) - m_vec)


def dipole_force(m_a_vec, m_c_vec, r) -> np.ndarray:
    """Force on dipole ``m_c_vec`` located at ``r`` relative to dipole ``m_a_vec``.

    Equal to grad(m_c . B_a) with respect to the capsule position.
    """
    m_a_vec = np.asarray(m_a_vec, dtype=float)
    m_c_vec = np.asarray(m_c_vec, dtype=float)
    r = np.asarray(r, dtype=float)
    dist = np.linalg.norm(r)
    if dist < RANGE_EPS:
        raise SingularRange(f"|r| = {dist:.3e} m")
    r_hat = r / dist
    ar = m_a_vec @ r_hat
    cr = m_c_vec @ r_hat
    return 3.0 * _K / dist ** 4 * (
        ar * m_c_vec + cr * m_a_vec + (m_a_vec @ m_c_vec - 5.0 * ar * cr) * r_hat)


def interaction_energy(m_a_vec, m_c_vec, r) -> float:
    """Potential energy -m_c . B_a(r); the force is its negative gradient."""
    return -float(np.asarray(m_c_vec) @ dipole_field(m_a_vec, r))


def actuation_state(cfg: ActuatorConfig, heading: AxisAngles, params: MagnetParams):
    """Return ``(r, m_a_vec, m_c_vec)`` for the actuator pose ``cfg``.

    The capsule moment is aligned with the actuator field at the capsule,
    i.e. the capsule is assumed to follow the rotating field.
    """
    w_dc = unit_from_axis_angles(heading)
    r = relative_position(cfg, heading)
    w_a = actuation_axis(w_dc, r / np.linalg.norm(r))
    m_a_vec = params.m_a * actuator_moment(axis_angles_from_unit(w_a), cfg.theta_ax)
    b = dipole_field(m_a_vec, r)
    m_c_vec = params.m_c * unit(b)
    return r, m_a_vec, m_c_vec


def rrma_force(cfg: ActuatorConfig, heading: AxisAngles, params: MagnetParams) -> np.ndarray:
    """Magnetic force on the capsule for actuator pose ``cfg`` and capsule heading."""
    r, m_a_vec, m_c_vec = actuation_state(cfg, heading, params)
    return dipole_force(m_a_vec, m_c_vec, r)


def reciprocation_deviation(cfg: ActuatorConfig, heading: AxisAngles,
                            params: MagnetParams) -> float:
    """Largest relative force change over the reciprocation range.

    Diagnostic for how well the force at theta_ax = 180 deg stands in for the
    force along the whole swing ``180 +/- theta_ar``.
    """
    f0 = rrma_force(ActuatorConfig(cfg.d, cfg.alpha, cfg.beta, 180.0), heading, params)
    worst = 0.0
    for sign in (-1.0, 1.0):
        c = ActuatorConfig(cfg.d, cfg.alpha, cfg.beta, 180.0 + sign * params.theta_ar)
        worst = max(worst, float(np.linalg.norm(rrma_force(c, heading, params) - f0)))
    return worst / float(np.linalg.norm(f0))


_SEEDS = [(D_BOUNDS[0], -ANGLE_BOUND, -ANGLE_BOUND), (D_BOUNDS[0], ANGLE_BOUND, ANGLE_BOUND),
          (D_BOUNDS[1], -ANGLE_BOUND, ANGLE_BOUND), (D_BOUNDS[1], ANGLE_BOUND, -ANGLE_BOUND)]


def solve_actuator_config(f_d, w_nc, params: MagnetParams | None = None,
                          warm_start: ActuatorConfig | None = None,
                          max_iter: int = 200, tol: float = 1e-10,
                          n_seeds: int = 4) -> tuple[ActuatorConfig, float]:
    """Find (d, alpha, beta) whose force best reproduces ``f_d`` for heading ``w_nc``.

    Bounded least squares started from ``warm_start`` (if given) and from
    bound-corner seeds; the best feasible solution wins. Returns the pose and
    the residual force norm in newtons.
    """
    params = params or MagnetParams()
    f_d = np.asarray(f_d, dtype=float)
    if not np.all(np.isfinite(f_d)):
        raise ValueError("desired force must be finite")
    heading = axis_angles_from_unit(w_nc)
    # scale angles to radians-ish magnitude so the box is well conditioned
    lower = np.array([D_BOUNDS[0], -ANGLE_BOUND, -ANGLE_BOUND])
    upper = np.array([D_BOUNDS[1], ANGLE_BOUND, ANGLE_BOUND])
    scale = np.array([1.0, 100.0, 100.0])
    f_scale = max(float(np.linalg.norm(f_d)), 1e-3)

    hz, hy = heading.theta_z, heading.theta_y

    def residual(z):
        x = z * scale
        f = rrma_force_kernel(x[0], x[1], x[2], 180.0, hz, hy, params.m_a, params.m_c)
        return (f - f_d) / f_scale

    starts = []
    if warm_start is not None:
        starts.append(np.clip(warm_start.as_array(), lower, upper))
    if warm_start is None or n_seeds > 0:
        starts.append(np.array([0.15, 0.0, 0.0]))
    starts.extend(np.array(s) for s in _SEEDS[:n_seeds])

    best = None
    for x0 in starts:
        z, cost, _ = least_squares_bounded(residual, x0 / scale, lower / scale,
                                           upper / scale, max_iter=max_iter, tol=tol)
        if best is None or cost < best[1]:
            best = (z, cost)
        if best[1] * f_scale < 1e-9:
            break
    if best is None or not np.isfinite(best[1]):
        raise SolverFailure("pose solver produced no finite solution")
    x = np.clip(best[0] * scale, lower, upper)
    cfg = ActuatorConfig(float(x[0]), float(x[1]), float(x[2]))
    res = float(np.linalg.norm(rrma_force(cfg, heading, params) - f_d))
    return cfg, res
