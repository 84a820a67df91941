"""Embedded Dormand-Prince 5(4) integrator compiled with numba.

The right-hand side is an ``@njit`` function ``rhs(t, y, args, out)`` writing
the derivative of the real state ``y`` into ``out``. A second ``@njit``
function ``guard(y)`` returns a size measure; once it exceeds ``guard_bound``
the run stops and the remaining outputs are NaN.

Output at the requested times uses the fourth-order continuous extension of
Hairer, Norsett & Wanner, so the step size is never constrained by the grid.
"""

from __future__ import annotations

import numpy as np
from numba import njit

OK = 0
DIVERGED = 1
STEP_UNDERFLOW = 2
MAX_STEPS = 3

STATUS_NAMES = {OK: "ok", DIVERGED: "diverged", STEP_UNDERFLOW: "step-underflow",
                MAX_STEPS: "max-steps"}

# Butcher tableau
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
A71, A73, A74, A75, A76 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
# difference between the fifth- and fourth-order weights
E1, E3, E4, E5, E6, E7 = (71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200,
                          22 / 525, -1 / 40)
# continuous extension
D1, D3, D4, D5, D6, D7 = (-12715105075 / 11282082432, 87487479700 / 32700410799,
                          -10690763975 / 1880347072, 701980252875 / 199316789632,
                          -1453857185 / 822651844, 69997945 / 29380423)


class IntegrationError(RuntimeError):
    pass


@njit(cache=True)
def _err_norm(v, y, ynew, rtol, atol):
    s = 0.0
    for i in range(v.size):
        sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
        s += (v[i] / sc) ** 2
    return np.sqrt(s / v.size)


@njit(cache=True)
def _initial_step(rhs, t0, y0, f0, args, rtol, atol, span):
    n = y0.size
    d0 = _err_norm(y0, y0, y0, rtol, atol)
    d1 = _err_norm(f0, y0, y0, rtol, atol)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + h0 * f0
    f1 = np.empty(n)
    rhs(t0 + h0, y1, args, f1)
    d2 = _err_norm(f1 - f0, y0, y0, rtol, atol) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


@njit(cache=True)
def dopri5(rhs, guard, y0, t_grid, args, rtol, atol, guard_bound, max_steps):
    """Integrate from ``t_grid[0]`` and sample at every entry of ``t_grid``.

    Returns ``(Y, status, t_stop, n_steps)``. ``Y[i]`` is NaN for samples after
    a divergence or failure. ``t_grid`` must be non-decreasing.
    """
    n = y0.size
    nt = t_grid.size
    Y = np.full((nt, n), np.nan)
    if nt == 0:
        return Y, OK, 0.0, 0
    t = t_grid[0]
    y = y0.copy()
    Y[0] = y
    t_end = t_grid[nt - 1]
    if guard(y) > guard_bound:
        return Y, DIVERGED, t, 0
    if t_end <= t:
        for i in range(1, nt):
            Y[i] = y
        return Y, OK, t, 0

    k1 = np.empty(n); k2 = np.empty(n); k3 = np.empty(n); k4 = np.empty(n)
    k5 = np.empty(n); k6 = np.empty(n); k7 = np.empty(n)
    yt = np.empty(n); ynew = np.empty(n); err = np.empty(n)
    rhs(t, y, args, k1)
    h = _initial_step(rhs, t, y, k1, args, rtol, atol, t_end - t)
    h_min = 1e-13 * max(1.0, abs(t_end))
    idx = 1
    while idx < nt and t_grid[idx] <= t:
        Y[idx] = y
        idx += 1
    steps = 0
    rejected = False
    while idx < nt:
        if steps >= max_steps:
            return Y, MAX_STEPS, t, steps
        if h < h_min:
            return Y, STEP_UNDERFLOW, t, steps
        last = t + h >= t_end - h_min
        if last:
            h = t_end - t
        for i in range(n):
            yt[i] = y[i] + h * A21 * k1[i]
        rhs(t + C2 * h, yt, args, k2)
        for i in range(n):
            yt[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i])
        rhs(t + C3 * h, yt, args, k3)
        for i in range(n):
            yt[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
        rhs(t + C4 * h, yt, args, k4)
        for i in range(n):
            yt[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
        rhs(t + C5 * h, yt, args, k5)
        for i in range(n):
            yt[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i]
                                + A65 * k5[i])
        rhs(t + h, yt, args, k6)
        for i in range(n):
            ynew[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i]
                                  + A76 * k6[i])
        rhs(t + h, ynew, args, k7)
        for i in range(n):
            err[i] = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                          + E7 * k7[i])
        en = _err_norm(err, y, ynew, rtol, atol)
        steps += 1
        if not np.isfinite(en):
            h *= 0.1
            rejected = True
            continue
        if en <= 1.0:
            t_new = t_end if last else t + h
            # continuous extension on [t, t_new]
            while idx < nt and t_grid[idx] <= t_new:
                th = (t_grid[idx] - t) / h
                th1 = 1.0 - th
                for i in range(n):
                    ydiff = ynew[i] - y[i]
                    bspl = h * k1[i] - ydiff
                    r4 = ydiff - h * k7[i] - bspl
                    r5 = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i]
                              + D6 * k6[i] + D7 * k7[i])
                    Y[idx, i] = y[i] + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)))
                idx += 1
            t = t_new
            for i in range(n):
                y[i] = ynew[i]
                k1[i] = k7[i]
            if guard(y) > guard_bound:
                return Y, DIVERGED, t, steps
            fac = 0.9 * en ** -0.2 if en > 0 else 10.0
            fac = min(10.0 if not rejected else 1.0, max(0.2, fac))
            h *= fac
            rejected = False
        else:
            h *= max(0.2, 0.9 * en ** -0.2)
            rejected = True
    return Y, OK, t, steps


@njit(cache=True)
def no_guard(y):
    return 0.0
