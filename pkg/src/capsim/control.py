"""Force controllers: PD, adaptive, MPC and robust multi-stage MPC."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .environment import (V_EPS, CapsuleState, PhysicalParams, friction_force,
                          mmc_coefficient, MmcPhase, step_dynamics)
from ._kernels import rollout_sensitivities, tracking_cost_grad, tracking_residuals
from .numopt import ShootingNlp, solve_shooting_nlp, project_forces
from .path import ReferenceWindow


class SolverFailure(RuntimeError):
    pass


def _spd(M, name):
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3) or not np.allclose(M, M.T):
        raise ValueError(f"{name} must be a symmetric 3x3 matrix")
    if np.min(np.linalg.eigvalsh(M)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass(frozen=True)
class Gains:
    K_P: np.ndarray = field(default_factory=lambda: 12.0 * np.eye(3))
    K_D: np.ndarray = field(default_factory=lambda: 0.05 * np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "K_P", _spd(self.K_P, "K_P"))
        object.__setattr__(self, "K_D", _spd(self.K_D, "K_D"))


@dataclass
class AdaptiveState:
    a: float = 0.0
    a_max: float = 3.0
    gamma: float = 200.0

    def __post_init__(self):
        if abs(self.a) > self.a_max:
            raise ValueError("|a| exceeds a_max")


def nominal_friction(v, rho_fric: float, w_des=None) -> np.ndarray:
    """Unit-R friction model used by the reactive laws.

    At (near) rest the friction to be overcome is the one opposing the
    intended motion direction ``w_des``.
    """
    if np.linalg.norm(v) >= V_EPS or w_des is None:
        return friction_force(v, rho_fric)
    w = np.asarray(w_des, dtype=float)
    return -rho_fric * w / np.linalg.norm(w)


def pd_force(e, e_dot, state: CapsuleState, params: PhysicalParams, gains: Gains,
             rho_fric: float = 0.05, w_des=None) -> np.ndarray:
    f_fric = nominal_friction(state.v, rho_fric, w_des)
    return gains.K_P @ e + gains.K_D @ e_dot - params.f_g - f_fric


def ac_force(e, e_dot, state: CapsuleState, params: PhysicalParams, gains: Gains,
             adapt: AdaptiveState, dt: float, rho_fric: float = 0.05, w_des=None):
    """Adaptive law; returns ``(force, updated AdaptiveState)``.

    ``a`` accumulates ``gamma * e_dot . f_fric * dt`` and multiplies the
    friction regressor, so it settles near ``-R``.
    """
    f_fric = nominal_friction(state.v, rho_fric, w_des)
    f = gains.K_P @ e + gains.K_D @ e_dot - params.f_g + adapt.a * f_fric
    a_new = adapt.a + adapt.gamma * float(np.asarray(e_dot) @ f_fric) * dt
    a_new = float(np.clip(a_new, -adapt.a_max, adapt.a_max))
    return f, AdaptiveState(a_new, adapt.a_max, adapt.gamma)


# --- predictive controllers -----------------------------------------------

@dataclass(frozen=True)
class MpcConfig:
    N: int = 10
    f_c: float = 10.0
    W_x: np.ndarray = field(default_factory=lambda: np.diag([1e4] * 3 + [1.0] * 3))
    W_N: np.ndarray | None = None
    W_f: np.ndarray = field(default_factory=lambda: np.eye(3))
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    f_min: float = 0.0
    f_max: float = 0.5
    rho_fric: float = 0.05
    max_iter: int = 100
    tol: float = 1e-10
    stall_tol: float = 1e-8

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.f_min > self.f_max:
            raise ValueError("f_min must not exceed f_max")
        if self.W_N is None:
            object.__setattr__(self, "W_N", 10.0 * np.asarray(self.W_x))
        for name in ("W_x", "W_N", "W_f"):
            W = np.asarray(getattr(self, name), dtype=float)
            if not np.allclose(W, W.T) or np.min(np.linalg.eigvalsh(W)) < -1e-12:
                raise ValueError(f"{name} must be symmetric PSD")

    @property
    def dt(self) -> float:
        return 1.0 / self.f_c


@dataclass(frozen=True)
class ScenarioSet:
    R: tuple
    w: tuple

    def __post_init__(self):
        if len(self.R) != len(self.w) or not self.R:
            raise ValueError("need matching, non-empty R and w")
        if abs(sum(self.w) - 1.0) > 1e-12 or min(self.w) < 0:
            raise ValueError("scenario weights must be non-negative and sum to 1")

    @classmethod
    def mmc(cls, R_max: float = 2.0) -> "ScenarioSet":
        phases = (MmcPhase.I, MmcPhase.II, MmcPhase.III, MmcPhase.IV)
        return cls(tuple(mmc_coefficient(p, R_max) for p in phases), (0.5, 0.225, 0.05, 0.225))


def predict_state(x: CapsuleState, f_d, R: float, params: PhysicalParams, dt: float,
                  rho_fric: float = 0.05) -> CapsuleState:
    return step_dynamics(x, f_d, params, dt, R=R, rho_fric=rho_fric)


def _rollout(x0: np.ndarray, U: np.ndarray, cap: float, params: PhysicalParams, dt: float):
    """Propagate ``[p, v]`` under ``step_dynamics`` arithmetic with Jacobians.

    Returns states (N+1, 6) and per-step A = dx'/dx (6x6), B = dx'/df (6x3).
    """
    N = len(U)
    m = params.m_c
    k = dt / m
    g = params.f_g
    X = np.empty((N + 1, 6))
    X[0] = x0
    A = np.zeros((N, 6, 6))
    B = np.zeros((N, 6, 3))
    I3 = np.eye(3)
    c = cap * k
    for i in range(N):
        p, v = X[i, :3], X[i, 3:]
        u = v + (U[i] + g) * k
        nu = np.linalg.norm(u)
        if nu <= c:
            v_new = np.zeros(3)
            dvdu = np.zeros((3, 3))
        else:
            uh = u / nu
            v_new = u - c * uh
            dvdu = I3 - (c / nu) * (I3 - np.outer(uh, uh))
        X[i + 1, 3:] = v_new
        X[i + 1, :3] = p + 0.5 * (v + v_new) * dt
        A[i, :3, :3] = I3
        A[i, :3, 3:] = 0.5 * dt * (I3 + dvdu)
        A[i, 3:, 3:] = dvdu
        B[i, 3:] = dvdu * k
        B[i, :3] = 0.5 * dt * dvdu * k
    return X, A, B


def _sqrt_psd(W):
    """Symmetric square root L with L.T @ L == W."""
    vals, vecs = np.linalg.eigh(W)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


class _TrackingCost:
    """Weighted multi-scenario tracking cost with an adjoint gradient."""

    def __init__(self, x0, Xd, cfg: MpcConfig, params: PhysicalParams, R_values, weights,
                 f_prev, scale: float = 1.0):
        self.x0 = np.asarray(x0, dtype=float)
        self.Xd = np.asarray(Xd, dtype=float)
        self.cfg = cfg
        self.params = params
        self.R = list(R_values)
        self.w = list(weights)
        self.f_prev = np.asarray(f_prev, dtype=float)
        self.scale = scale
        self.Wx = np.asarray(cfg.W_x, dtype=float)
        self.WN = np.asarray(cfg.W_N, dtype=float)
        self.Wf = np.asarray(cfg.W_f, dtype=float)
        self._Lx, self._LN, self._Lf = _sqrt_psd(self.Wx), _sqrt_psd(self.WN), _sqrt_psd(self.Wf)
        self._caps = np.array(self.R, dtype=float) * cfg.rho_fric
        self._w = np.array(self.w, dtype=float)

    def scenario_costs(self, U):
        U = np.asarray(U, dtype=float).reshape(-1, 3)
        out = []
        for R in self.R:
            X, _, _ = _rollout(self.x0, U, R * self.cfg.rho_fric, self.params, self.cfg.dt)
            out.append(self._state_cost(X) + self._force_cost(U))
        return np.array(out)

    def _state_cost(self, X):
        E = self.Xd - X
        N = len(X) - 1
        val = float(np.einsum("ij,jk,ik->", E[:N], self.Wx, E[:N]))
        return val + float(E[N] @ self.WN @ E[N])

    def _force_cost(self, U):
        D = np.diff(np.vstack([self.f_prev, U]), axis=0)
        return float(np.einsum("ij,jk,ik->", D, self.Wf, D))

    def residuals(self, U):
        """Stacked weighted residuals ``r`` (cost = r.r) and Jacobian dr/dU."""
        U = np.ascontiguousarray(U, dtype=float).reshape(-1, 3)
        r, J = tracking_residuals(self.x0, U, self.Xd, self._Lx, self._LN, self._Lf,
                                  self.f_prev, self._caps, self._w, self.params.m_c,
                                  self.params.f_g[2], self.cfg.dt)
        s = 1.0 / np.sqrt(self.scale)
        return s * r, s * J

    def residuals_reference(self, U):
        """Plain numpy version of :meth:`residuals`."""
        U = np.ascontiguousarray(U, dtype=float).reshape(-1, 3)
        N = len(U)
        rs, Js = [], []
        for R, w in zip(self.R, self.w):
            if w == 0.0:
                continue
            X, S = rollout_sensitivities(self.x0, U, R * self.cfg.rho_fric, self.params.m_c,
                                         self.params.f_g[2], self.cfg.dt)
            sw = np.sqrt(w)
            E = self.Xd - X
            rs.append(sw * (E[:N] @ self._Lx.T).ravel())
            rs.append(sw * (self._LN @ E[N]))
            Js.append(-sw * np.einsum("ab,ibk->iak", self._Lx, S[:N]).reshape(-1, 3 * N))
            Js.append(-sw * (self._LN @ S[N]))
        D = np.diff(np.vstack([self.f_prev, U]), axis=0)
        rs.append((D @ self._Lf.T).ravel())
        Jf = np.zeros((N, 3, N, 3))
        for i in range(N):
            Jf[i, :, i, :] = self._Lf
            if i > 0:
                Jf[i, :, i - 1, :] = -self._Lf
        Js.append(Jf.reshape(3 * N, 3 * N))
        s = 1.0 / np.sqrt(self.scale)
        return s * np.concatenate(rs), s * np.vstack(Js)

    def state_trajectories(self, U):
        U = np.ascontiguousarray(U, dtype=float).reshape(-1, 3)
        return [rollout_sensitivities(self.x0, U, R * self.cfg.rho_fric, self.params.m_c,
                                      self.params.f_g[2], self.cfg.dt) for R in self.R]

    def value(self, U):
        return float(np.dot(self.w, self.scenario_costs(U)))

    def __call__(self, U):
        U = np.ascontiguousarray(U, dtype=float).reshape(-1, 3)
        caps = np.array(self.R, dtype=float) * self.cfg.rho_fric
        total, grad = tracking_cost_grad(self.x0, U, self.Xd, self.Wx, self.WN, self.Wf,
                                         self.f_prev, caps, np.array(self.w, dtype=float),
                                         self.params.m_c, self.params.f_g[2], self.cfg.dt)
        return total / self.scale, grad / self.scale


def feedforward_guess(x: CapsuleState, window: ReferenceWindow, cfg: MpcConfig,
                      params: PhysicalParams, R: float = 1.0) -> np.ndarray:
    """Gravity plus friction compensation along each reference velocity."""
    V = window.velocities[:cfg.N]
    dirs = V / np.maximum(np.linalg.norm(V, axis=1, keepdims=True), 1e-12)
    U = R * cfg.rho_fric * dirs - params.f_g
    # first step also corrects the current velocity error
    U[0] += params.m_c * (window.velocities[0] - x.v) * cfg.f_c
    return project_forces(U, cfg.f_min, cfg.f_max)


def _state_constraints(cfg: MpcConfig, x0, params, R_values):
    lo = None if cfg.x_min is None else np.asarray(cfg.x_min, dtype=float)
    hi = None if cfg.x_max is None else np.asarray(cfg.x_max, dtype=float)
    if lo is None and hi is None:
        return None

    def con(U):
        parts = []
        for R in R_values:
            X, _, _ = _rollout(x0, U, R * cfg.rho_fric, params, cfg.dt)
            if lo is not None:
                parts.append((X[1:] - lo).ravel())
            if hi is not None:
                parts.append((hi - X[1:]).ravel())
        return np.concatenate(parts)
    return con


def _merge_scenarios(R_values, weights):
    merged: dict[float, float] = {}
    for R, w in zip(R_values, weights):
        merged[float(R)] = merged.get(float(R), 0.0) + float(w)
    return tuple(merged), tuple(merged.values())


REST_SPEED = 1e-9


def _stuck(x: CapsuleState, f, R: float, cfg: MpcConfig, params: PhysicalParams) -> bool:
    nxt = predict_state(x, f, R, params, cfg.dt, cfg.rho_fric)
    return bool(np.linalg.norm(nxt.v) < REST_SPEED)


def _solve(x: CapsuleState, window: ReferenceWindow, cfg: MpcConfig, params: PhysicalParams,
           R_values, weights, warm=None, f_prev=None, merge=True):
    N = cfg.N
    if len(window.points) != N + 1:
        raise ValueError(f"reference window must hold N+1={N + 1} points")
    if warm is None:
        warm = feedforward_guess(x, window, cfg, params, float(np.dot(weights, R_values)))
    warm = np.asarray(warm, dtype=float).reshape(N, 3)
    if f_prev is None:
        f_prev = warm[0]
    x0 = x.x
    if merge:
        R_values, weights = _merge_scenarios(R_values, weights)
    cost = _TrackingCost(x0, window.states, cfg, params, R_values, weights, f_prev)
    c0, _ = cost(warm)
    cost.scale = c0 if c0 > 0 else 1.0
    nlp = ShootingNlp(horizon=N, cost=cost, f_min=cfg.f_min, f_max=cfg.f_max,
                      state_con=_state_constraints(cfg, x0, params, R_values),
                      jac=True, max_iter=cfg.max_iter, tol=cfg.tol, residual=cost.residuals,
                      stall_tol=cfg.stall_tol)
    U, obj, converged = solve_shooting_nlp(nlp, warm)
    if np.linalg.norm(x.v) < REST_SPEED and _stuck(x, U[0], min(R_values), cfg, params):
        # the first step sits on the stiction plateau, where the gradient is
        # zero; also start from the sliding side and keep the better optimum
        alt = feedforward_guess(x, window, cfg, params, min(R_values))
        if not np.array_equal(alt, warm):
            U2, obj2, conv2 = solve_shooting_nlp(nlp, alt)
            if obj2 < obj:
                U, obj, converged = U2, obj2, conv2
    if not np.all(np.isfinite(U)):
        raise SolverFailure("non-finite forces from the MPC solve")
    return U, obj * cost.scale, converged, cost


def mpc_solve(x: CapsuleState, window: ReferenceWindow, cfg: MpcConfig, params: PhysicalParams,
              warm=None, f_prev=None):
    """Nominal MPC (R = 1, no disturbance). Returns ``(f_seq, f_d, objective)``."""
    U, obj, _, _ = _solve(x, window, cfg, params, (1.0,), (1.0,), warm, f_prev)
    return U, U[0].copy(), obj


def rmmpc_solve(x: CapsuleState, window: ReferenceWindow, cfg: MpcConfig, params: PhysicalParams,
                scenarios: ScenarioSet | None = None, warm=None, f_prev=None, merge=True):
    """Scenario-weighted MPC with robust horizon 1 and one shared force sequence.

    Scenarios sharing an R value are merged (weights summed) unless ``merge``
    is False; the objective is identical either way.
    """
    scenarios = scenarios or ScenarioSet.mmc()
    U, obj, _, _ = _solve(x, window, cfg, params, scenarios.R, scenarios.w, warm, f_prev, merge)
    return U, U[0].copy(), obj


def scenario_objective(x: CapsuleState, window: ReferenceWindow, cfg: MpcConfig,
                       params: PhysicalParams, U, R_values, weights, f_prev):
    """Per-scenario costs of a given force sequence (for post-hoc checks)."""
    cost = _TrackingCost(x.x, window.states, cfg, params, R_values, weights, f_prev)
    return cost.scenario_costs(U)


def shift_warm_start(U: np.ndarray) -> np.ndarray:
    return np.vstack([U[1:], U[-1:]])
