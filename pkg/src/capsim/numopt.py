"""Numerical optimisation kernels: bounded nonlinear least squares and
a direct single-shooting NLP solver used by the predictive controllers."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import least_squares, minimize


class NonFiniteResidual(ValueError):
    pass


class InfeasibleStart(UserWarning):
    pass


class IterationLimit(RuntimeError):
    pass


def least_squares_bounded(fun: Callable, x0, lower, upper, max_iter: int = 200,
                          tol: float = 1e-10):
    """Minimise ``0.5 * |fun(x)|^2`` subject to ``lower <= x <= upper``.

    Trust Region Reflective iterations. Returns ``(x, residual_norm, converged)``.
    The result is never worse than ``x0`` and always lies inside the box.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x0 = np.clip(np.asarray(x0, dtype=float), lower, upper)
    r0 = np.asarray(fun(x0), dtype=float)
    if not np.all(np.isfinite(r0)):
        raise NonFiniteResidual(f"residual not finite at x0={x0}")
    norm0 = float(np.linalg.norm(r0))
    if norm0 == 0.0:
        return x0, 0.0, True

    # TRF needs a strictly interior start; nudge off active bounds
    span = upper - lower
    x_start = np.clip(x0, lower + 1e-10 * span, upper - 1e-10 * span)
    sol = least_squares(fun, x_start, bounds=(lower, upper), method="trf",
                        xtol=tol, ftol=tol, gtol=tol, max_nfev=max_iter * (x0.size + 1))
    if not np.all(np.isfinite(sol.fun)):
        raise NonFiniteResidual("residual became non-finite during the solve")
    x = np.clip(sol.x, lower, upper)
    norm = float(np.linalg.norm(fun(x)))
    x, norm = _polish_active_set(fun, x, norm, lower, upper, tol, max_iter)
    if norm > norm0:
        return x0, norm0, False
    return x, norm, bool(sol.status > 0)


def _polish_active_set(fun, x, norm, lower, upper, tol, max_iter):
    """Pin near-bound variables and finish the free ones with unbounded LM.

    TRF creeps toward an active bound and can stop well short of the
    attainable residual there; the polished point is kept only if it is
    inside the box and better.
    """
    span = upper - lower
    near_lo = x - lower < 1e-4 * span
    near_hi = upper - x < 1e-4 * span
    free = ~(near_lo | near_hi)
    if free.all() or not free.any():
        return x, norm
    base = np.where(near_lo, lower, np.where(near_hi, upper, x))

    def sub(z):
        y = base.copy()
        y[free] = z
        return fun(y)

    r = np.asarray(sub(base[free]), dtype=float)
    if r.size < free.sum():
        return x, norm
    try:
        sol = least_squares(sub, base[free], method="lm", xtol=tol, ftol=tol, gtol=tol,
                            max_nfev=max_iter * (x.size + 1))
    except ValueError:
        return x, norm
    y = base.copy()
    y[free] = sol.x
    if np.any(y < lower) or np.any(y > upper):
        return x, norm
    n_new = float(np.linalg.norm(fun(y)))
    if np.isfinite(n_new) and n_new < norm:
        return y, n_new
    return x, norm


# --- single shooting ------------------------------------------------------

@dataclass
class ShootingNlp:
    """Optimise ``N`` 3-vector controls through a deterministic rollout.

    ``cost(U)`` evaluates the objective of the (N, 3) control array and may
    return ``(value, gradient)`` when ``jac=True``. ``state_con(U)`` returns
    the stacked state-box slacks (must be >= 0) or ``None``.

    If the objective is a sum of squares, ``residual(U)`` may supply
    ``(r, dr/dU)`` with ``cost == r @ r``; the solver then takes
    Gauss-Newton steps instead of quasi-Newton ones. ``stall_tol`` > 0 also
    stops that path after three accepted steps in a row whose relative
    decrease is below it.
    """
    horizon: int
    cost: Callable
    f_min: float = 0.0
    f_max: float = np.inf
    state_con: Callable | None = None
    state_con_jac: Callable | None = None
    jac: bool = False
    max_iter: int = 100
    tol: float = 1e-10
    residual: Callable | None = None
    stall_tol: float = 0.0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.f_min > self.f_max:
            raise ValueError("f_min must not exceed f_max")
        if self.f_min > 0.0:
            warnings.warn("f_min > 0 makes the force constraint nonconvex", stacklevel=2)


def project_forces(U: np.ndarray, f_min: float, f_max: float) -> np.ndarray:
    U = np.array(U, dtype=float, copy=True)
    norms = np.linalg.norm(U, axis=1)
    for i, n in enumerate(norms):
        if n > f_max:
            U[i] *= f_max / n
        elif n < f_min:
            U[i] = U[i] / n * f_min if n > 0 else np.array([0.0, 0.0, f_min])
    return U


def solve_shooting_nlp(p: ShootingNlp, warm_start=None):
    """Sequential quadratic programming over the stacked controls.

    Returns ``(forces (N, 3), objective, converged)``. Constraint satisfaction
    is checked after the solve; if SLSQP leaves a violation the feasible
    projection of its iterate (or the projected start) is returned instead.
    """
    N = p.horizon
    U0 = np.zeros((N, 3)) if warm_start is None else np.asarray(warm_start, dtype=float).reshape(N, 3)
    U0p = project_forces(U0, p.f_min, p.f_max)
    if not np.allclose(U0p, U0):
        warnings.warn("warm start violates force bounds; projected", InfeasibleStart, stacklevel=2)

    def objective(z):
        out = p.cost(z.reshape(N, 3))
        if p.jac:
            val, grad = out
            return float(val), np.asarray(grad, dtype=float).ravel()
        return float(out)

    cons = []
    if np.isfinite(p.f_max):
        def upper(z):
            U = z.reshape(N, 3)
            return p.f_max ** 2 - np.einsum("ij,ij->i", U, U)

        def upper_jac(z):
            U = z.reshape(N, 3)
            J = np.zeros((N, 3 * N))
            for i in range(N):
                J[i, 3 * i:3 * i + 3] = -2.0 * U[i]
            return J
        cons.append({"type": "ineq", "fun": upper, "jac": upper_jac})
    if p.f_min > 0.0:
        def lower(z):
            U = z.reshape(N, 3)
            return np.einsum("ij,ij->i", U, U) - p.f_min ** 2

        def lower_jac(z):
            return -upper_jac(z)
        cons.append({"type": "ineq", "fun": lower, "jac": lower_jac})
    if p.state_con is not None:
        con = {"type": "ineq", "fun": lambda z: p.state_con(z.reshape(N, 3))}
        if p.state_con_jac is not None:
            con["jac"] = lambda z: p.state_con_jac(z.reshape(N, 3))
        cons.append(con)

    z0 = U0p.ravel()
    f0 = objective(z0)[0] if p.jac else objective(z0)
    if not np.isfinite(f0):
        raise ValueError("objective not finite at the initial guess")

    if p.residual is not None and p.f_min == 0.0:
        U, val, converged, nit = _projected_lm(p, U0p)
        if _state_feasible(p, U):
            p.info = {"nit": nit, "message": "projected Gauss-Newton"}
            return U, val, converged
        # state box active: hand over to the constrained solver
        U0p = U
        z0 = U.ravel()
        f0 = val

    if not cons:
        res = minimize(objective, z0, jac=p.jac or None, method="BFGS",
                       options={"maxiter": p.max_iter, "gtol": p.tol})
    else:
        res = minimize(objective, z0, jac=p.jac or None, method="SLSQP", constraints=cons,
                       options={"maxiter": p.max_iter, "ftol": p.tol})
    U = project_forces(res.x.reshape(N, 3), p.f_min, p.f_max)
    val = objective(U.ravel())
    val = val[0] if p.jac else val
    feasible = _state_feasible(p, U)
    if not feasible or not np.isfinite(val) or val > f0 and _state_feasible(p, U0p):
        U, val = U0p, f0
        converged = False
    else:
        converged = bool(res.success)
    p.info = {"nit": int(getattr(res, "nit", 0)), "message": str(res.message)}
    return U, float(val), converged


def _projected_lm(p: ShootingNlp, U0):
    """Levenberg-Marquardt steps projected onto the force ball."""
    N = p.horizon
    U = U0
    r, J = p.residual(U)
    val = float(r @ r)
    mu = 1e-6
    converged = False
    nit = slow = 0
    for nit in range(1, p.max_iter + 1):
        g = J.T @ r
        H = J.T @ J
        scale = np.maximum(np.diag(H), 1e-12 * max(np.max(np.diag(H)), 1e-300))
        accepted = False
        while mu < 1e12:
            step = np.linalg.solve(H + mu * np.diag(scale), -g)
            U_new = project_forces(U + step.reshape(N, 3), p.f_min, p.f_max)
            r_new, J_new = p.residual(U_new)
            val_new = float(r_new @ r_new)
            if np.isfinite(val_new) and val_new <= val:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            converged = True  # no descent direction left
            break
        drop = val - val_new
        moved = float(np.max(np.abs(U_new - U)))
        U, r, J, val = U_new, r_new, J_new, val_new
        mu = max(mu / 10.0, 1e-12)
        if drop <= p.tol * max(val, 1e-300) or moved < 1e-13:
            converged = True
            break
        # crawling along a friction kink: a few tiny gains in a row end the solve
        slow = slow + 1 if drop <= p.stall_tol * val else 0
        if slow >= 3:
            converged = True
            break
    return U, val, converged, nit


def _state_feasible(p: ShootingNlp, U) -> bool:
    if p.state_con is None:
        return True
    return bool(np.all(p.state_con(U) >= -1e-6))
