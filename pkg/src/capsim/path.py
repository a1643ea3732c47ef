"""Spline trajectories, nearest-point projection and reference generation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from ._kernels import refine_candidates


class DuplicateConsecutivePoints(ValueError):
    pass


@dataclass(frozen=True)
class ReferencePoint:
    p_d: np.ndarray
    tangent: np.ndarray
    s: float


@dataclass(frozen=True)
class ReferenceWindow:
    points: list
    velocities: np.ndarray  # (N+1, 3)

    @property
    def positions(self) -> np.ndarray:
        return np.array([rp.p_d for rp in self.points])

    @property
    def states(self) -> np.ndarray:
        """Desired states ``[p, v]`` stacked as (N+1, 6)."""
        return np.hstack([self.positions, self.velocities])


class SplinePath:
    """Natural cubic spline through key points, parameterised by s in [0, 1].

    Knots are placed by normalised cumulative chord length.
    """

    def __init__(self, key_points, grid_spacing: float = 5e-4):
        pts = np.asarray(key_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise ValueError("need at least two 3-D key points")
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(chords < 1e-12):
            raise DuplicateConsecutivePoints("consecutive key points coincide")
        knots = np.concatenate([[0.0], np.cumsum(chords)])
        knots /= knots[-1]
        knots[-1] = 1.0
        self.key_points = pts
        self.knots = knots
        self._cs = CubicSpline(knots, pts, bc_type="natural", axis=0)
        self._d1 = self._cs.derivative(1)
        self._d2 = self._cs.derivative(2)
        self.breaks = np.ascontiguousarray(self._cs.x)
        self.coeffs = np.ascontiguousarray(self._cs.c)

        n_grid = max(200, int(math.ceil(chords.sum() * 1.2 / grid_spacing)))
        self.grid_s = np.linspace(0.0, 1.0, n_grid + 1)
        self.grid_p = self._cs(self.grid_s)
        speeds = np.linalg.norm(self._d1(np.linspace(0.0, 1.0, 4 * n_grid + 1)), axis=1)
        if np.min(speeds) < 1e-9:
            raise ValueError("spline derivative vanishes; key points fold back on themselves")
        seg = np.linalg.norm(np.diff(self.grid_p, axis=0), axis=1)
        self.grid_arclength = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.grid_arclength[-1])

    def __call__(self, s):
        return self._cs(s)

    def derivative(self, s):
        return self._d1(s)

    def second_derivative(self, s):
        return self._d2(s)

    def tangent(self, s) -> np.ndarray:
        d = self._d1(s)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def arclength(self, s) -> np.ndarray:
        return np.interp(s, self.grid_s, self.grid_arclength)

    def reference(self, s: float) -> ReferencePoint:
        return ReferencePoint(self._cs(s), self.tangent(s), float(s))


def build_spline(key_points) -> SplinePath:
    return SplinePath(key_points)


_MAX_CANDIDATES = 16


def nearest_point(path: SplinePath, p_c) -> ReferencePoint:
    """Closest point on the path to ``p_c`` (ties go to the smaller s)."""
    p_c = np.asarray(p_c, dtype=float)
    d2 = np.sum((path.grid_p - p_c) ** 2, axis=1)
    n = len(d2)
    # local minima of the sampled distance, endpoints included
    left = np.concatenate([[np.inf], d2[:-1]])
    right = np.concatenate([d2[1:], [np.inf]])
    idx = np.flatnonzero((d2 <= left) & (d2 <= right))
    if len(idx) > _MAX_CANDIDATES:
        idx = idx[np.argsort(d2[idx], kind="stable")[:_MAX_CANDIDATES]]
    lo = path.grid_s[np.maximum(idx - 1, 0)]
    hi = path.grid_s[np.minimum(idx + 1, n - 1)]
    s = refine_candidates(path.breaks, path.coeffs, p_c, path.grid_s[idx].astype(float), lo, hi)
    # endpoint clamps are candidates too
    s = np.concatenate([s, path.grid_s[idx], [0.0, 1.0]])
    dist = np.linalg.norm(path(s) - p_c, axis=1)
    best = dist.min()
    ties = s[dist <= best + 1e-12]
    s_star = float(np.clip(ties.min(), 0.0, 1.0))
    return path.reference(s_star)


def desired_velocity(rp: ReferencePoint | None, w_nc, V_c: float) -> np.ndarray:
    if V_c <= 0:
        raise ValueError("V_c must be positive")
    w = np.asarray(w_nc, dtype=float)
    return V_c * w / np.linalg.norm(w)


def reference_sequence(path: SplinePath, p_c, N: int, V_c: float, f_c: float) -> ReferenceWindow:
    """N+1 reference points found by projecting an extrapolated capsule position."""
    if N < 1 or f_c <= 0:
        raise ValueError("need N >= 1 and f_c > 0")
    points, vels = [], []
    p_est = np.asarray(p_c, dtype=float)
    for _ in range(N + 1):
        rp = nearest_point(path, p_est)
        v = V_c * rp.tangent
        points.append(rp)
        vels.append(v)
        p_est = rp.p_d + v / f_c
    return ReferenceWindow(points, np.array(vels))


# --- presets -------------------------------------------------------------

def _arc(center, radius, a0, a1, n):
    a = np.radians(np.linspace(a0, a1, n))
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a),
                            np.zeros_like(a)])


def _line(p0, p1, step):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    return p0 + np.linspace(0.0, 1.0, n)[:, None] * (p1 - p0)


def _stitch(pieces):
    out = [pieces[0]]
    for p in pieces[1:]:
        out.append(p[1:] if np.allclose(p[0], out[-1][-1]) else p)
    return np.vstack(out)


def serpentine_points(n_runs: int, run_length: float, radius: float, step: float = 0.01):
    """Planar boustrophedon: straight runs joined by 180 degree bends."""
    pieces, y, direction = [], 0.0, 1.0
    for k in range(n_runs):
        x0, x1 = (0.0, run_length) if direction > 0 else (run_length, 0.0)
        pieces.append(_line((x0, y, 0.0), (x1, y, 0.0), step))
        if k < n_runs - 1:
            if direction > 0:
                pieces.append(_arc((run_length, y + radius), radius, -90, 90, 7))
            else:
                pieces.append(_arc((0.0, y + radius), radius, 270, 90, 7))
            y += 2 * radius
            direction = -direction
    return _stitch(pieces)


def _scaled(points, target_length: float):
    # chord-length knots make the spline scale-equivariant
    points = np.asarray(points, float)
    return points * (target_length / SplinePath(points).length)


def preset_key_points(name: str) -> np.ndarray:
    if name == "straight":
        return np.array([[0.0, 0.0, 0.0], [0.215, 0.0, 0.0]])
    if name == "slope":
        c, s = math.cos(math.radians(30.0)), math.sin(math.radians(30.0))
        return np.array([[0.0, 0.0, 0.0], [0.05 * c, 0.0, 0.05 * s]])
    if name == "bent":
        pts = _stitch([
            _line((0, 0, 0), (0.06, 0, 0), 0.01),
            _arc((0.06, 0.02), 0.02, -90, 90, 7),
            _line((0.06, 0.04, 0), (0.0, 0.04, 0), 0.01),
            _arc((0.0, 0.06), 0.02, 270, 180, 4),
            _line((-0.02, 0.06, 0), (-0.02, 0.12, 0), 0.01),
        ])
        return _scaled(pts, 0.244)
    if name == "complex":
        return _scaled(serpentine_points(5, 0.10, 0.015), 0.684)
    if name == "intestine":
        # planar stand-in of the same total length; the anatomical shape is unpublished
        return _scaled(serpentine_points(8, 0.25, 0.02), 2.46)
    if name == "intestine_short":
        return _scaled(serpentine_points(3, 0.08, 0.02), 0.30)
    raise KeyError(f"unknown path preset {name!r}")


PRESETS = ("straight", "slope", "bent", "complex", "intestine", "intestine_short")


def preset_path(name: str) -> SplinePath:
    return SplinePath(preset_key_points(name))
