"""Compiled inner loops. Each kernel mirrors a readable numpy routine
elsewhere in the package and is cross-checked against it in the tests."""
from __future__ import annotations

import math

import numpy as np
from numba import njit

_CACHE = True


# --- spline ----------------------------------------------------------------

@njit(cache=_CACHE)
def spline_eval(x, c, s, out):
    """Value, first and second derivative of a piecewise cubic at ``s``.

    ``x``: breakpoints (K+1,), ``c``: PPoly coefficients (4, K, 3).
    ``out`` receives a (3, 3) array: rows are p, p', p''.
    """
    K = x.shape[0] - 1
    lo, hi = 0, K
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if s >= x[mid]:
            lo = mid
        else:
            hi = mid
    t = s - x[lo]
    for j in range(3):
        c0, c1, c2, c3 = c[0, lo, j], c[1, lo, j], c[2, lo, j], c[3, lo, j]
        out[0, j] = ((c0 * t + c1) * t + c2) * t + c3
        out[1, j] = (3.0 * c0 * t + 2.0 * c1) * t + c2
        out[2, j] = 6.0 * c0 * t + 2.0 * c1


@njit(cache=_CACHE)
def refine_candidates(x, c, q, s0, lo0, hi0):
    """Safeguarded Newton on |p(s) - q|^2 for each bracketed candidate."""
    n = s0.shape[0]
    res = np.empty(n)
    buf = np.empty((3, 3))
    for k in range(n):
        s, lo, hi = s0[k], lo0[k], hi0[k]
        for _ in range(60):
            spline_eval(x, c, s, buf)
            g = 0.0
            h = 0.0
            for j in range(3):
                diff = buf[0, j] - q[j]
                g += diff * buf[1, j]
                h += buf[1, j] * buf[1, j] + diff * buf[2, j]
            if g < 0.0:
                lo = s
            elif g > 0.0:
                hi = s
            if h > 0.0:
                s_new = s - g / h
                if s_new < lo or s_new > hi:
                    s_new = 0.5 * (lo + hi)
            else:
                s_new = 0.5 * (lo + hi)
            step = abs(s_new - s)
            s = s_new
            if step < 1e-14:
                break
        res[k] = s
    return res


# --- shooting rollout --------------------------------------------------------

@njit(cache=_CACHE)
def _rollout_one(x0, U, cap, m, gz, dt, X, A, B):
    N = U.shape[0]
    k = dt / m
    c = cap * k
    for j in range(6):
        X[0, j] = x0[j]
    for i in range(N):
        u0 = X[i, 3] + U[i, 0] * k
        u1 = X[i, 4] + U[i, 1] * k
        u2 = X[i, 5] + (U[i, 2] + gz) * k
        nu = math.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
        D = np.zeros((3, 3))
        if nu <= c:
            vn0 = 0.0
            vn1 = 0.0
            vn2 = 0.0
        else:
            uh = (u0 / nu, u1 / nu, u2 / nu)
            vn0 = u0 - c * uh[0]
            vn1 = u1 - c * uh[1]
            vn2 = u2 - c * uh[2]
            r = c / nu
            for a in range(3):
                for b in range(3):
                    D[a, b] = r * uh[a] * uh[b]
                D[a, a] += 1.0 - r
        X[i + 1, 3] = vn0
        X[i + 1, 4] = vn1
        X[i + 1, 5] = vn2
        X[i + 1, 0] = X[i, 0] + 0.5 * (X[i, 3] + vn0) * dt
        X[i + 1, 1] = X[i, 1] + 0.5 * (X[i, 4] + vn1) * dt
        X[i + 1, 2] = X[i, 2] + 0.5 * (X[i, 5] + vn2) * dt
        for a in range(6):
            for b in range(6):
                A[i, a, b] = 0.0
            for b in range(3):
                B[i, a, b] = 0.0
        for a in range(3):
            A[i, a, a] = 1.0
            for b in range(3):
                A[i, a, 3 + b] = 0.5 * dt * D[a, b]
                A[i, 3 + a, 3 + b] = D[a, b]
                B[i, 3 + a, b] = D[a, b] * k
                B[i, a, b] = 0.5 * dt * D[a, b] * k
            A[i, a, 3 + a] += 0.5 * dt


@njit(cache=_CACHE)
def tracking_cost_grad(x0, U, Xd, Wx, WN, Wf, f_prev, caps, weights, m, gz, dt):
    """Scenario-weighted tracking cost and its gradient w.r.t. the forces."""
    N = U.shape[0]
    X = np.empty((N + 1, 6))
    A = np.empty((N, 6, 6))
    B = np.empty((N, 6, 3))
    grad = np.zeros((N, 3))
    total = 0.0
    E = np.empty((N + 1, 6))
    for sidx in range(caps.shape[0]):
        w = weights[sidx]
        if w == 0.0:
            continue
        _rollout_one(x0, U, caps[sidx], m, gz, dt, X, A, B)
        for i in range(N + 1):
            for j in range(6):
                E[i, j] = Xd[i, j] - X[i, j]
        sc = 0.0
        for i in range(N):
            sc += E[i] @ Wx @ E[i]
        sc += E[N] @ WN @ E[N]
        total += w * sc
        lam = -2.0 * (WN @ E[N])
        for i in range(N - 1, -1, -1):
            gi = B[i].T @ lam
            for j in range(3):
                grad[i, j] += w * gi[j]
            lam = A[i].T @ lam - 2.0 * (Wx @ E[i])
    prev = f_prev.copy()
    gD = np.zeros((N, 3))
    for i in range(N):
        d = U[i] - prev
        total += d @ Wf @ d
        gD[i] = 2.0 * (Wf @ d)
        prev = U[i]
    for i in range(N):
        for j in range(3):
            grad[i, j] += gD[i, j]
            if i + 1 < N:
                grad[i, j] -= gD[i + 1, j]
    return total, grad


@njit(cache=_CACHE)
def rollout_states(x0, U, cap, m, gz, dt):
    N = U.shape[0]
    X = np.empty((N + 1, 6))
    A = np.empty((N, 6, 6))
    B = np.empty((N, 6, 3))
    _rollout_one(x0, U, cap, m, gz, dt, X, A, B)
    return X


# --- actuation force ---------------------------------------------------------

@njit(cache=_CACHE)
def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@njit(cache=_CACHE)
def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@njit(cache=_CACHE)
def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@njit(cache=_CACHE)
def rrma_force_kernel(d, alpha, beta, theta_ax, hz, hy, m_a, m_c):
    """Force on the capsule; angles in degrees, heading as (theta_z, theta_y)."""
    k = 1e-7
    deg = math.pi / 180.0
    frame = _rz(hz * deg) @ _ry(-hy * deg)
    w_dc = frame[:, 0].copy()
    r = d * (frame @ _rx(beta * deg) @ _ry(alpha * deg) @ np.array([0.0, 0.0, -1.0]))
    dist = math.sqrt(r @ r)
    rh = r / dist
    wa = 3.0 * rh * (rh @ w_dc) - w_dc
    wa = wa / math.sqrt(wa @ wa)
    az = math.atan2(wa[1], wa[0])
    ay = math.asin(min(1.0, max(-1.0, wa[2])))
    ma = m_a * (_rz(az) @ _ry(-ay) @ _rx(theta_ax * deg) @ np.array([0.0, 0.0, 1.0]))
    b = k / dist ** 3 * (3.0 * rh * (rh @ ma) - ma)
    mc = m_c * b / math.sqrt(b @ b)
    ar = ma @ rh
    cr = mc @ rh
    return 3.0 * k / dist ** 4 * (ar * mc + cr * ma + (ma @ mc - 5.0 * ar * cr) * rh)


@njit(cache=_CACHE)
def rollout_sensitivities(x0, U, cap, m, gz, dt):
    """States (N+1, 6) and forward sensitivities dX_i/dU as (N+1, 6, 3N)."""
    N = U.shape[0]
    X = np.empty((N + 1, 6))
    A = np.empty((N, 6, 6))
    B = np.empty((N, 6, 3))
    _rollout_one(x0, U, cap, m, gz, dt, X, A, B)
    S = np.zeros((N + 1, 6, 3 * N))
    for i in range(N):
        S[i + 1] = A[i] @ S[i]
        for a in range(6):
            for b in range(3):
                S[i + 1, a, 3 * i + b] += B[i, a, b]
    return X, S


@njit(cache=_CACHE)
def tracking_residuals(x0, U, Xd, Lx, LN, Lf, f_prev, caps, weights, m, gz, dt):
    """Stacked weighted residuals and Jacobian of the scenario tracking cost.

    Per scenario with non-zero weight: N blocks sqrt(w) Lx (Xd_i - X_i), then
    sqrt(w) LN (Xd_N - X_N); finally Lf (f_i - f_{i-1}) for every step.
    """
    N = U.shape[0]
    n_s = 0
    for j in range(caps.shape[0]):
        if weights[j] != 0.0:
            n_s += 1
    rows = n_s * 6 * (N + 1) + 3 * N
    r = np.zeros(rows)
    J = np.zeros((rows, 3 * N))
    row = 0
    for j in range(caps.shape[0]):
        w = weights[j]
        if w == 0.0:
            continue
        sw = np.sqrt(w)
        X, S = rollout_sensitivities(x0, U, caps[j], m, gz, dt)
        for i in range(N + 1):
            L = Lx if i < N else LN
            for a in range(6):
                acc = 0.0
                for b in range(6):
                    acc += L[a, b] * (Xd[i, b] - X[i, b])
                r[row] = sw * acc
                for k in range(3 * (i if i < N else N)):
                    s = 0.0
                    for b in range(6):
                        s += L[a, b] * S[i, b, k]
                    J[row, k] = -sw * s
                row += 1
    for i in range(N):
        for a in range(3):
            acc = 0.0
            for b in range(3):
                prev = f_prev[b] if i == 0 else U[i - 1, b]
                acc += Lf[a, b] * (U[i, b] - prev)
                J[row, 3 * i + b] = Lf[a, b]
                if i > 0:
                    J[row, 3 * (i - 1) + b] = -Lf[a, b]
            r[row] = acc
            row += 1
    return r, J
