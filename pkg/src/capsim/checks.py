"""Invariant checks with independent oracles, shared by `capsim validate`
and the acceptance tests. Each check returns a CheckResult; none raises on
a failed property."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import magnetics as mg
from .control import MpcConfig, ScenarioSet, mpc_solve, rmmpc_solve
from .environment import CapsuleState, PhysicalParams, step_dynamics
from .path import nearest_point, preset_path, reference_sequence
from .simloop import AntipodalHeading, slerp_heading


@dataclass
class CheckResult:
    name: str
    suite: str
    passed: bool
    metric: float
    threshold: float
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: {self.metric:.3e} (limit {self.threshold:.1e}, "
                f"{self.seconds:.2f} s)")


def _random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# --- magnetics ---------------------------------------------------------------------

@_timed
def field_rotation(n: int = 1000, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    """|b . w_dc| / |b| for the actuator moment built on the actuation axis."""
    rng = np.random.default_rng(seed)
    worst, used = 0.0, 0
    while used < n:
        w_dc, r_hat = _random_unit(rng, 2)
        w_a = mg.actuation_axis(w_dc, r_hat)
        try:
            angles = mg.axis_angles_from_unit(w_a)
        except mg.DegenerateAxis:
            continue
        m_a = mg.actuator_moment(angles, rng.uniform(0.0, 360.0))
        b = mg.dipole_field(m_a, rng.uniform(0.1, 0.25) * r_hat)
        worst = max(worst, abs(b @ w_dc) / np.linalg.norm(b))
        used += 1
    return CheckResult("field-rotation invariant", "magnetics", worst < tol, worst, tol,
                       detail={"samples": used})


@_timed
def force_gradient(n: int = 1000, seed: int = 1, tol: float = 1e-6, h: float = 1e-6,
                   force=None) -> CheckResult:
    """Analytic dipole force vs central differences of the interaction energy."""
    force = force or mg.dipole_force
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m_a = _random_unit(rng, 1)[0] * mg.DEFAULT_M_A
        m_c = _random_unit(rng, 1)[0] * mg.DEFAULT_M_C
        r = _random_unit(rng, 1)[0] * rng.uniform(0.1, 0.25)
        fd = np.array([-(mg.interaction_energy(m_a, m_c, r + h * e)
                         - mg.interaction_energy(m_a, m_c, r - h * e)) / (2 * h)
                       for e in np.eye(3)])
        f = force(m_a, m_c, r)
        worst = max(worst, np.linalg.norm(f - fd) / np.linalg.norm(fd))
    return CheckResult("force-gradient oracle", "magnetics", worst < tol, worst, tol)


@_timed
def pose_round_trip(n: int = 100, seed: int = 2, tol: float = 1e-6) -> CheckResult:
    """Forward RRMA force of a random in-bounds pose, then invert it."""
    rng = np.random.default_rng(seed)
    params = mg.MagnetParams()
    worst, match = 0.0, 0.0
    for _ in range(n):
        cfg = mg.ActuatorConfig(rng.uniform(*mg.D_BOUNDS), rng.uniform(-15, 15), rng.uniform(-15, 15))
        heading = mg.AxisAngles(rng.uniform(0, 360), rng.uniform(-60, 60))
        f = mg.rrma_force(cfg, heading, params)
        sol, res = mg.solve_actuator_config(f, mg.unit_from_axis_angles(heading), params)
        f_back = mg.rrma_force(sol, heading, params)
        worst = max(worst, res)
        match = max(match, float(np.linalg.norm(f_back - f)))
        if not sol.in_bounds():
            worst = math.inf
    return CheckResult("pose-solver round trip", "magnetics", worst < tol and match < tol,
                       max(worst, match), tol)


# --- path ----------------------------------------------------------------------------

ORACLE_PRESETS = ("straight", "slope", "bent", "complex", "intestine")


@_timed
def nearest_point_oracle(n: int = 1000, seed: int = 3, presets=ORACLE_PRESETS,
                         grid: int = 100_000) -> CheckResult:
    """nearest_point vs a dense brute-force grid, tolerance one grid chord.

    Distances must agree within a chord, and the points themselves too
    unless the grid shows a tie (another branch equally near).
    """
    rng = np.random.default_rng(seed)
    worst_ratio = 0.0
    detail = {}
    for name in presets:
        sp = preset_path(name)
        s = np.linspace(0.0, 1.0, grid)
        P = sp(s)
        chord = float(np.max(np.linalg.norm(np.diff(P, axis=0), axis=1)))
        lo, hi = P.min(axis=0) - 0.02, P.max(axis=0) + 0.02
        Q = rng.uniform(lo, hi, size=(n, 3))
        # exact nearest grid sample for every query
        d_bf, idx = cKDTree(P).query(Q)
        bad = 0
        for q, dk, k in zip(Q, d_bf, idx):
            rp = nearest_point(sp, q)
            d_ours = float(np.linalg.norm(rp.p_d - q))
            ratio = abs(d_ours - dk) / chord
            sep = float(np.linalg.norm(rp.p_d - P[k]))
            if sep > chord:
                # different branch: only acceptable as a tie
                tie = d_ours <= dk + 1e-12
                ratio = max(ratio, 0.0 if tie else sep / chord)
            bad += ratio > 1.0
            worst_ratio = max(worst_ratio, ratio)
        detail[name] = {"chord": chord, "failures": bad}
    return CheckResult("nearest-point oracle", "path", worst_ratio <= 1.0, worst_ratio, 1.0,
                       detail=detail)


# --- control -------------------------------------------------------------------------

@_timed
def rmmpc_degeneracy(n: int = 50, seed: int = 4, tol: float = 1e-6) -> CheckResult:
    """RMMPC with every scenario at R = 1 (tree not merged) vs nominal MPC."""
    rng = np.random.default_rng(seed)
    sp = preset_path("intestine_short")
    params = PhysicalParams()
    cfg = MpcConfig(tol=1e-14, max_iter=400, stall_tol=0.0)
    flat = ScenarioSet((1.0, 1.0, 1.0, 1.0), ScenarioSet.mmc().w)
    worst = 0.0
    for _ in range(n):
        s0 = rng.uniform(0.0, 0.95)
        p = sp(s0) + rng.uniform(-0.003, 0.003, 3) * np.array([1, 1, 0.3])
        v = sp.tangent(s0) * rng.uniform(0.0, 0.006) + rng.normal(size=3) * 5e-4
        heading = sp.tangent(s0)
        x = CapsuleState(p, v, heading)
        window = reference_sequence(sp, p, cfg.N, 0.003, cfg.f_c)
        f_prev = -params.f_g + rng.normal(size=3) * 0.01
        _, f_m, _ = mpc_solve(x, window, cfg, params, f_prev=f_prev)
        _, f_r, _ = rmmpc_solve(x, window, cfg, params, flat, f_prev=f_prev, merge=False)
        worst = max(worst, float(np.linalg.norm(f_m - f_r)))
    return CheckResult("RMMPC degeneracy", "control", worst < tol, worst, tol)


# --- simloop -------------------------------------------------------------------------

def _angle_deg(a, b):
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(np.dot(a, b))))


@_timed
def slerp_properties(n: int = 10_000, seed: int = 5, tol: float = 1e-9) -> CheckResult:
    """Unit norm and angle-from-current = min(phi, 45) on random pairs, plus continuity."""
    rng = np.random.default_rng(seed)
    A, B = _random_unit(rng, n), _random_unit(rng, n)
    phi = np.degrees(np.arctan2(np.linalg.norm(np.cross(A, B), axis=1), np.sum(A * B, axis=1)))
    antipodal = int(np.sum(phi > 179.0))
    out = np.array([slerp_heading(a, b, allow_antipodal=p > 179.0) for a, b, p in zip(A, B, phi)])
    got = np.degrees(np.arctan2(np.linalg.norm(np.cross(A, out), axis=1), np.sum(A * out, axis=1)))
    norm_err = float(np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)))
    angle_err = float(np.max(np.abs(got - np.minimum(phi, 45.0))))
    # the guard must fire on every near-antipodal pair
    raised = 0
    for a, b in zip(A[phi > 179.0], B[phi > 179.0]):
        try:
            slerp_heading(a, b)
        except AntipodalHeading:
            raised += 1
    # continuity: bracket the threshold from both sides
    jump = 0.0
    for a, b in zip(A[:200], B[:200]):
        axis = np.cross(a, b)
        if np.linalg.norm(axis) < 1e-6:
            continue
        axis /= np.linalg.norm(axis)
        for eps in (1e-3, 1e-6):
            lo = _rotate(a, axis, 45.0 - eps)
            hi = _rotate(a, axis, 45.0 + eps)
            gap = np.linalg.norm(slerp_heading(a, lo) - slerp_heading(a, hi))
            jump = max(jump, gap / math.radians(2 * eps))
    passed = norm_err < 1e-12 and angle_err < tol and jump < 1.0 + 1e-6 and raised == antipodal
    return CheckResult("SLERP properties", "simloop", passed, max(angle_err, norm_err), tol,
                       detail={"norm_err": norm_err, "angle_err": angle_err,
                               "continuity_ratio": jump, "antipodal_pairs": antipodal})


def _rotate(v, axis, deg):
    th = math.radians(deg)
    return (v * math.cos(th) + np.cross(axis, v) * math.sin(th)
            + axis * (axis @ v) * (1 - math.cos(th)))


# --- environment -------------------------------------------------------------------

def braking_error(dt: float, n_speeds: int = 64, T: float = 1.0, rho: float = 0.05,
                  F: float = 0.02, m: float = 0.01) -> float:
    """Worst final-position error over a family of constant-force braking runs.

    A capsule sliding along x under constant applied force ``F < rho``
    decelerates uniformly and stops; the closed form is exact kinematics.
    The family of initial speeds samples every phase of the stop within a step.
    """
    params = PhysicalParams(m_c=m, g=0.0)
    a = (rho - F) / m
    worst = 0.0
    for v0 in np.linspace(0.2, 0.8, n_speeds) * a * T:
        t_stop = v0 / a
        exact = v0 * t_stop - 0.5 * a * t_stop ** 2
        s = CapsuleState(np.zeros(3), np.array([v0, 0.0, 0.0]), np.array([1.0, 0, 0]))
        for _ in range(int(round(T / dt))):
            s = step_dynamics(s, np.array([F, 0.0, 0.0]), params, dt, 1.0, rho)
        worst = max(worst, abs(s.p[0] - exact))
    return worst


def free_flight_error(dt: float, T: float = 1.0) -> float:
    """Constant force, no friction: exact kinematics, error at rounding level."""
    params = PhysicalParams(m_c=0.01)
    F = np.array([0.003, -0.002, 0.1])
    v0 = np.array([0.01, 0.0, -0.02])
    s = CapsuleState(np.zeros(3), v0, np.array([1.0, 0, 0]))
    for _ in range(int(round(T / dt))):
        s = step_dynamics(s, F, params, dt)
    a = (F + params.f_g) / params.m_c
    return float(np.linalg.norm(s.p - (v0 * T + 0.5 * a * T * T)))


@_timed
def integrator_order(dt0: float = 0.1, halvings: int = 3, min_order: float = 1.9) -> CheckResult:
    dts = [dt0 / 2 ** k for k in range(halvings + 1)]
    errs = [braking_error(dt) for dt in dts]
    orders = [math.log2(errs[k] / errs[k + 1]) for k in range(halvings)]
    free = max(free_flight_error(dt) for dt in dts)
    observed = min(orders)
    return CheckResult("integrator order", "environment", observed >= min_order and free < 1e-12,
                       observed, min_order, detail={"errors": errs, "orders": orders,
                                                    "free_flight_error": free})


SUITES = {
    "magnetics": (field_rotation, force_gradient, pose_round_trip),
    "path": (nearest_point_oracle,),
    "control": (rmmpc_degeneracy,),
    "simloop": (slerp_properties,),
    "environment": (integrator_order,),
}


def run_suites(names=None):
    names = names or list(SUITES)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise KeyError(f"unknown suite(s): {sorted(unknown)}")
    return [check() for name in names for check in SUITES[name]]
