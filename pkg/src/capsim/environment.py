"""Capsule point-mass dynamics and the intestinal resistance model."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

V_EPS = 1e-4  # m/s, stiction threshold
GRAVITY = 9.81


class MmcPhase(enum.IntEnum):
    I = 1
    II = 2
    III = 3
    IV = 4


class MmcMode(str, enum.Enum):
    CONSTANT = "constant"
    SLOW_VARYING = "slow_varying"
    PROBABILISTIC = "probabilistic"


PHASE_PROBS = {MmcPhase.I: 0.5, MmcPhase.II: 0.225, MmcPhase.III: 0.05, MmcPhase.IV: 0.225}


@dataclass(frozen=True)
class CapsuleState:
    p: np.ndarray
    v: np.ndarray
    heading: np.ndarray

    @classmethod
    def at_rest(cls, p, heading=(1.0, 0.0, 0.0)):
        h = np.asarray(heading, dtype=float)
        return cls(np.asarray(p, dtype=float).copy(), np.zeros(3), h / np.linalg.norm(h))

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.p, self.v])


@dataclass(frozen=True)
class PhysicalParams:
    m_c: float = 0.010
    g: float = GRAVITY

    def __post_init__(self):
        if self.m_c <= 0:
            raise ValueError("capsule mass must be positive")

    @property
    def f_g(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.m_c * self.g])


@dataclass
class EnvironmentModel:
    """Friction level, MMC phase process and disturbance bound; owns its RNG."""
    rho_fric: float = 0.050
    R_max: float = 2.0
    rho_dist: float = 0.0
    mmc_mode: MmcMode = MmcMode.CONSTANT
    phase_probs: dict = field(default_factory=lambda: dict(PHASE_PROBS))
    seed: int = 0
    period: float = 120.0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.mmc_mode = MmcMode(self.mmc_mode)
        if self.rho_fric < 0 or self.rho_dist < 0:
            raise ValueError("rho_fric and rho_dist must be non-negative")
        if self.R_max < 1.0:
            raise ValueError("R_max must be >= 1")
        if not math.isclose(sum(self.phase_probs.values()), 1.0, abs_tol=1e-12):
            raise ValueError("phase probabilities must sum to 1")
        self.rng = np.random.default_rng(self.seed)

    def reseed(self, seed: int) -> "EnvironmentModel":
        return replace(self, seed=seed)

    def sample(self, t: float) -> tuple[MmcPhase, float, np.ndarray]:
        """Draw (phase, R, f_dist) for the control interval starting at ``t``."""
        if self.mmc_mode is MmcMode.PROBABILISTIC:
            phase = sample_phase(self.rng, self.phase_probs)
            R = mmc_coefficient(phase, self.R_max)
        elif self.mmc_mode is MmcMode.SLOW_VARYING:
            phase = MmcPhase.I
            R = 1.0 + (self.R_max - 1.0) * 0.5 * (1.0 - math.cos(2.0 * math.pi * t / self.period))
        else:
            phase, R = MmcPhase.I, 1.0
        return phase, R, disturbance_sample(self.rng, self.rho_dist)


ENV_PRESETS = {
    "env1": dict(mmc_mode="constant", rho_dist=0.0),
    "env2": dict(mmc_mode="slow_varying", rho_dist=0.0),
    "env3": dict(mmc_mode="probabilistic", rho_dist=0.0),
    "env4": dict(mmc_mode="probabilistic", rho_dist=0.005),
}


def environment_preset(name: str, seed: int = 0, **overrides) -> EnvironmentModel:
    if name not in ENV_PRESETS:
        raise KeyError(f"unknown environment preset {name!r}")
    kw = dict(rho_fric=0.050, R_max=2.0)
    kw.update(ENV_PRESETS[name])
    kw.update(overrides)
    return EnvironmentModel(seed=seed, **kw)


def friction_force(v, rho_fric: float, f_other=None) -> np.ndarray:
    """Coulomb friction: ``-rho * v/|v|`` while sliding.

    Below ``V_EPS`` friction opposes the other forces ``f_other`` with
    magnitude ``min(rho, |f_other|)`` (zero if ``f_other`` is not given).
    """
    v = np.asarray(v, dtype=float)
    speed = np.linalg.norm(v)
    if speed >= V_EPS:
        return -rho_fric * v / speed
    if f_other is None:
        return np.zeros(3)
    f_other = np.asarray(f_other, dtype=float)
    mag = np.linalg.norm(f_other)
    if mag == 0.0:
        return np.zeros(3)
    return -min(rho_fric, mag) * f_other / mag


def step_friction(v, f_drive, cap: float, mass: float, dt: float) -> np.ndarray:
    """Friction delivered over one step of length ``dt``.

    Opposes the velocity the capsule would reach without friction; when the
    friction impulse ``cap * dt`` suffices to stop it, it does exactly that
    and no more, so friction can never reverse or speed up the capsule.
    """
    u = np.asarray(v, dtype=float) + np.asarray(f_drive, dtype=float) * (dt / mass)
    need = np.linalg.norm(u) * mass / dt
    if need <= cap:
        return -u * (mass / dt)
    return -cap * u / np.linalg.norm(u)


def mmc_coefficient(phase: MmcPhase, R_max: float) -> float:
    if R_max < 1.0:
        raise ValueError("R_max must be >= 1")
    phase = MmcPhase(phase)
    if phase is MmcPhase.I:
        return 1.0
    if phase is MmcPhase.III:
        return float(R_max)
    return 0.5 * (1.0 + R_max)


_PHASE_ORDER = (MmcPhase.I, MmcPhase.II, MmcPhase.III, MmcPhase.IV)


def sample_phase(rng: np.random.Generator, probs=None) -> MmcPhase:
    probs = probs or PHASE_PROBS
    u = rng.random()
    acc = 0.0
    for ph in _PHASE_ORDER:
        acc += probs[ph]
        if u < acc:
            return ph
    return _PHASE_ORDER[-1]


def disturbance_sample(rng: np.random.Generator, rho_dist: float) -> np.ndarray:
    """Uniform sample from the closed ball of radius ``rho_dist``.

    Always consumes the same number of draws so the stream stays aligned.
    """
    g = rng.standard_normal(3)
    u = rng.random()
    if rho_dist <= 0.0:
        return np.zeros(3)
    n = np.linalg.norm(g)
    if n == 0.0:
        return np.zeros(3)
    return rho_dist * u ** (1.0 / 3.0) * g / n


def env_force(state: CapsuleState, R: float, rho_fric: float, f_dist, f_applied=None,
              params: PhysicalParams | None = None, dt: float | None = None) -> np.ndarray:
    """``R * f_fric + f_dist``.

    Given ``f_applied``, ``params`` and ``dt`` the friction is the per-step
    friction of :func:`step_friction`; otherwise it is plain Coulomb friction.
    """
    f_dist = np.asarray(f_dist, dtype=float)
    if f_applied is None or params is None or dt is None:
        return R * friction_force(state.v, rho_fric) + f_dist
    drive = np.asarray(f_applied, dtype=float) + params.f_g + f_dist
    return step_friction(state.v, drive, R * rho_fric, params.m_c, dt) + f_dist


def step_dynamics(state: CapsuleState, f_applied, params: PhysicalParams, dt: float,
                  R: float = 1.0, rho_fric: float = 0.0, f_dist=None) -> CapsuleState:
    """Advance one step with constant acceleration over ``dt``.

    ``v' = v + a dt`` and ``p' = p + v dt + a dt^2 / 2`` with
    ``a = (f_applied + f_g + f_env) / m_c``. The same routine is the MPC
    prediction model, so the two can never drift apart.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    f_dist = np.zeros(3) if f_dist is None else np.asarray(f_dist, dtype=float)
    f_env = env_force(state, R, rho_fric, f_dist, f_applied, params, dt)
    a = (np.asarray(f_applied, dtype=float) + params.f_g + f_env) / params.m_c
    v_new = state.v + a * dt
    p_new = state.p + state.v * dt + 0.5 * a * dt * dt
    speed = np.linalg.norm(v_new)
    heading = v_new / speed if speed >= V_EPS else state.heading
    return CapsuleState(p_new, v_new, heading)
