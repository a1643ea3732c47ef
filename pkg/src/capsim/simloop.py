"""Closed-loop trajectory following: reference, controller, heading limit,
actuator pose, plant step. Plus per-run metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .control import (AdaptiveState, Gains, MpcConfig, ScenarioSet, SolverFailure as ControlFailure,
                      ac_force, mpc_solve, pd_force, rmmpc_solve, shift_warm_start)
from .environment import (CapsuleState, EnvironmentModel, PhysicalParams,
                          environment_preset, step_dynamics)
from .magnetics import (ActuatorConfig, MagnetParams, SolverFailure as PoseFailure,
                        solve_actuator_config)
from .path import SplinePath, nearest_point, preset_path, reference_sequence

HEADING_LIMIT_DEG = 45.0
ANTIPODAL_DEG = 179.0
DIVERGENCE_M = 0.5
COMPLETION_S = 0.999
COMPLETION_HOLD = 5
CONTROLLERS = ("pd", "ac", "mpc", "rmmpc")


class AntipodalHeading(ValueError):
    pass


# --- heading limit -----------------------------------------------------------

def _angle(a, b) -> float:
    """Angle in degrees between two vectors, accurate near 0 and 180."""
    ax, ay, az = float(a[0]), float(a[1]), float(a[2])
    bx, by, bz = float(b[0]), float(b[1]), float(b[2])
    cx, cy, cz = ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx
    return math.degrees(math.atan2(math.sqrt(cx * cx + cy * cy + cz * cz),
                                   ax * bx + ay * by + az * bz))


def _fixed_perpendicular(w):
    ref = np.array([0.0, 0.0, 1.0]) if abs(w[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(w, ref)
    return u / np.linalg.norm(u)


def slerp_heading(w_c, w_dc, threshold: float = HEADING_LIMIT_DEG,
                  allow_antipodal: bool = False) -> np.ndarray:
    """Turn from ``w_c`` toward ``w_dc`` by at most ``threshold`` degrees.

    Beyond the threshold the result is the great-circle point at exactly
    ``threshold`` from ``w_c``. Near-antipodal requests (> 179 deg) raise
    unless ``allow_antipodal``, in which case the turn goes through a fixed
    perpendicular whenever the plane of rotation is undefined.
    """
    w_c = np.asarray(w_c, dtype=float)
    w_dc = np.asarray(w_dc, dtype=float)
    for name, w in (("w_c", w_c), ("w_dc", w_dc)):
        if abs(math.sqrt(float(w @ w)) - 1.0) > 1e-9:
            raise ValueError(f"{name} must be unit-norm")
    phi = _angle(w_c, w_dc)
    if phi <= threshold:
        return w_dc.copy()
    if phi > ANTIPODAL_DEG and not allow_antipodal:
        raise AntipodalHeading(f"heading change of {phi:.3f} deg has no unique rotation plane")
    # sin(phi - th) w_c + sin(th) w_dc over sin(phi), written in the
    # orthonormal basis (w_c, u) so it stays accurate as sin(phi) -> 0
    u = w_dc - float(w_dc @ w_c) * w_c
    nu = math.sqrt(float(u @ u))
    u = u / nu if nu > 1e-12 else _fixed_perpendicular(w_c)
    th = math.radians(threshold)
    out = math.cos(th) * w_c + math.sin(th) * u
    return out / math.sqrt(float(out @ out))


# --- configuration ---------------------------------------------------------------

@dataclass
class ControllerSpec:
    name: str = "pd"
    gains: Gains = field(default_factory=Gains)
    a_max: float = 3.0
    gamma: float = 200.0
    mpc: MpcConfig | None = None
    scenarios: ScenarioSet | None = None

    def __post_init__(self):
        self.name = self.name.lower()
        if self.name not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.name!r}; choose from {CONTROLLERS}")


@dataclass
class SimConfig:
    path: str | np.ndarray = "intestine_short"
    environment: str | EnvironmentModel = "env1"
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    V_c: float = 0.003
    f_c: float = 10.0
    seed: int = 0
    max_steps: int | None = None
    params: PhysicalParams = field(default_factory=PhysicalParams)
    magnets: MagnetParams = field(default_factory=MagnetParams)
    solve_pose: bool = True

    def __post_init__(self):
        if self.V_c <= 0 or self.f_c <= 0:
            raise ValueError("V_c and f_c must be positive")
        if isinstance(self.controller, str):
            self.controller = ControllerSpec(self.controller)

    @property
    def dt(self) -> float:
        return 1.0 / self.f_c

    def build_path(self) -> SplinePath:
        if isinstance(self.path, str):
            return preset_path(self.path)
        return SplinePath(self.path)

    def build_environment(self) -> EnvironmentModel:
        if isinstance(self.environment, str):
            return environment_preset(self.environment, seed=self.seed)
        return self.environment.reseed(self.seed)

    def step_limit(self, path: SplinePath) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        nominal = path.length / (self.V_c * self.dt)
        return int(math.ceil(4.0 * nominal)) + 50


# --- logs and results -----------------------------------------------------------

@dataclass(frozen=True)
class StepLog:
    t: float
    p_c: np.ndarray
    v_c: np.ndarray
    heading: np.ndarray
    p_d: np.ndarray
    f_d: np.ndarray
    actuator: ActuatorConfig | None
    phase: int
    R: float
    position_error: float
    orientation_error: float
    s: float = 0.0
    pose_residual: float = float("nan")
    pose_failed: bool = False


@dataclass
class RunResult:
    mean_position_error: float
    max_position_error: float
    mean_orientation_error: float
    max_orientation_error: float
    mean_speed: float
    completion_time: float | None
    logs: list = field(repr=False, default_factory=list)
    diverged: bool = False
    completed: bool = False


@dataclass
class ControllerState:
    """Per-run mutable controller memory."""
    adapt: AdaptiveState | None = None
    warm: np.ndarray | None = None
    f_prev: np.ndarray | None = None
    pose: ActuatorConfig | None = None


# --- one control step ---------------------------------------------------------------

def _mpc_config(cfg: SimConfig) -> MpcConfig:
    base = cfg.controller.mpc or MpcConfig()
    if base.f_c != cfg.f_c:
        base = replace(base, f_c=cfg.f_c)
    return base


def control_step(state: CapsuleState, path: SplinePath, cfg: SimConfig, mem: ControllerState):
    """One pass of the trajectory-following loop for the configured controller.

    Returns ``(actuator pose, f_d, p_d, w_nc, pose residual, pose failed)``.
    ``mem`` is updated in place.
    """
    spec = cfg.controller
    params = cfg.params
    if spec.name in ("pd", "ac"):
        rp = nearest_point(path, state.p)
        w_nc = slerp_heading(state.heading, rp.tangent, allow_antipodal=True)
        v_d = cfg.V_c * w_nc
        e = rp.p_d - state.p
        e_dot = v_d - state.v
        rho = (spec.mpc or MpcConfig()).rho_fric
        if spec.name == "pd":
            f_d = pd_force(e, e_dot, state, params, spec.gains, rho, w_des=v_d)
        else:
            if mem.adapt is None:
                mem.adapt = AdaptiveState(0.0, spec.a_max, spec.gamma)
            f_d, mem.adapt = ac_force(e, e_dot, state, params, spec.gains, mem.adapt,
                                      cfg.dt, rho, w_des=v_d)
        p_d = rp.p_d
    else:
        mcfg = _mpc_config(cfg)
        window = reference_sequence(path, state.p, mcfg.N, cfg.V_c, cfg.f_c)
        warm = None if mem.warm is None else shift_warm_start(mem.warm)
        try:
            if spec.name == "mpc":
                U, f_d, _ = mpc_solve(state, window, mcfg, params, warm, mem.f_prev)
            else:
                U, f_d, _ = rmmpc_solve(state, window, mcfg, params, spec.scenarios, warm,
                                        mem.f_prev)
            mem.warm = U
        except ControlFailure:
            f_d = mem.f_prev if mem.f_prev is not None else -params.f_g
            mem.warm = None
        v0 = window.velocities[0]
        w_dc = v0 / np.linalg.norm(v0)
        w_nc = slerp_heading(state.heading, w_dc, allow_antipodal=True)
        p_d = window.points[0].p_d
    f_d = np.asarray(f_d, dtype=float)
    mem.f_prev = f_d.copy()

    pose, residual, failed = mem.pose, float("nan"), False
    if cfg.solve_pose:
        try:
            pose, residual = solve_actuator_config(f_d, w_nc, cfg.magnets, warm_start=mem.pose,
                                                   n_seeds=0 if mem.pose is not None else 4)
        except (PoseFailure, ValueError):
            failed = True
        else:
            mem.pose = pose
    return pose, f_d, p_d, w_nc, residual, failed


# --- full run ---------------------------------------------------------------------

def run_simulation(cfg: SimConfig) -> RunResult:
    """Step the loop at ``f_c`` until the capsule holds the path end or a limit hits."""
    path = cfg.build_path()
    env = cfg.build_environment()
    dt = cfg.dt
    p0 = path(0.0)
    state = CapsuleState.at_rest(p0, path.tangent(0.0))
    mem = ControllerState()
    logs: list[StepLog] = []
    hold = 0
    diverged = completed = False
    completion_time = None
    for k in range(cfg.step_limit(path)):
        t = k * dt
        rp = nearest_point(path, state.p)
        pos_err = float(np.linalg.norm(rp.p_d - state.p))
        ori_err = _angle(state.heading, rp.tangent)
        if pos_err > DIVERGENCE_M:
            diverged = True
            break
        hold = hold + 1 if rp.s >= COMPLETION_S else 0
        if hold >= COMPLETION_HOLD:
            completed = True
            completion_time = t
            break
        phase, R, f_dist = env.sample(t)
        pose, f_d, p_d, _, residual, failed = control_step(state, path, cfg, mem)
        logs.append(StepLog(t, state.p.copy(), state.v.copy(), state.heading.copy(), p_d, f_d,
                            pose, int(phase), float(R), pos_err, ori_err, rp.s, residual, failed))
        state = step_dynamics(state, f_d, cfg.params, dt, R, env.rho_fric, f_dist)
    result = compute_metrics(logs, path)
    result.diverged = diverged
    result.completed = completed
    result.completion_time = completion_time
    return result


def compute_metrics(logs, path: SplinePath | None = None) -> RunResult:
    """Aggregate step logs. Errors are taken as logged (nearest-point convention)."""
    if not logs:
        raise ValueError("need at least one step log")
    pos = np.array([lg.position_error for lg in logs])
    ori = np.array([lg.orientation_error for lg in logs])
    elapsed = logs[-1].t - logs[0].t
    if path is not None and elapsed > 0:
        progress = float(path.arclength(logs[-1].s) - path.arclength(logs[0].s))
        speed = progress / elapsed
    elif elapsed > 0:
        speed = float(np.linalg.norm(logs[-1].p_c - logs[0].p_c)) / elapsed
    else:
        speed = 0.0
    return RunResult(float(pos.mean()), float(pos.max()), float(ori.mean()), float(ori.max()),
                     speed, None, list(logs))
