"""Closed-form solution of the non-interacting (U = 0) Bloch equations.

Without interaction the first-order moments obey a closed linear system,

    s_x' = -g_- s_x
    s_y' = 2J s_z - g_- s_y
    s_z' = -2J s_y - g_- s_z + g_+ n + g_gain
    n'   = g_+ s_z - g_- n + g_gain

whose solution relaxes towards a fixed point ``alpha`` while oscillating at
``omega = sqrt(4J^2 - g_+^2)`` (only this oscillatory branch is supported).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ParameterError, SystemParams


class UnsupportedRegimeError(ParameterError):
    """Raised outside the oscillatory regime ``4J^2 > gamma_+^2``."""


class NoSteadyStateError(ParameterError):
    pass


class SingularEnvelopeError(ArithmeticError):
    pass


@dataclass(frozen=True)
class KappaParams:
    kappa1: float
    kappa2: float
    kappa3: float
    kappa4: float

    def __post_init__(self):
        if self.kappa3 < 0:
            raise ValueError("kappa3 must be >= 0")
        if not -math.pi < self.kappa4 <= math.pi:
            raise ValueError("kappa4 must lie in (-pi, pi]")

    def as_array(self) -> np.ndarray:
        return np.array([self.kappa1, self.kappa2, self.kappa3, self.kappa4])


@dataclass(frozen=True)
class SteadyState:
    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        if self.alpha.shape != (4,) or self.alpha[0] != 0.0:
            raise ValueError("alpha must be a 4-vector with alpha[0] == 0")


def _require_oscillatory(params: SystemParams) -> float:
    d = 4 * params.J ** 2 - params.gamma_plus ** 2
    if not d > 0:
        raise UnsupportedRegimeError(
            f"unsupported regime: 4J^2 - gamma_+^2 = {d:.6g} <= 0 (no oscillatory solution)")
    return math.sqrt(d)


def steady_state(params: SystemParams) -> SteadyState:
    """Fixed point of the U = 0 first-order equations, ``(0, a2, a3, a4)``."""
    J, gm, gp = params.J, params.gamma_minus, params.gamma_plus
    if params.gamma_loss == 0 and params.gamma_gain == 0:
        # closed system: the derivative vanishes at the origin, nothing attracts
        return SteadyState(np.zeros(4))
    if gm == 0:
        raise NoSteadyStateError("gamma_- = 0: no steady state (gain and loss rates equal)")
    den = 4 * J ** 2 - gp ** 2 + gm ** 2
    if den == 0:
        raise NoSteadyStateError("4J^2 - gamma_+^2 + gamma_-^2 = 0: no steady state")
    pref = (gp ** 2 - gm ** 2) / den
    if gm * (gp + gm) == 0:
        raise NoSteadyStateError(f"gamma_- = {gm:.3g} underflows: no representable steady state")
    return SteadyState(pref * np.array([0.0, 2 * J / gm, 1.0, 1 + 4 * J ** 2 / (gm * (gp + gm))]))


def solve_kappas(initial, params: SystemParams) -> KappaParams:
    """Fit the four constants of the oscillatory solution to ``(s_x, s_y, s_z, n)`` at t = 0."""
    omega = _require_oscillatory(params)
    s = np.asarray(getattr(initial, "as_array", lambda: initial)(), dtype=float)[:4]
    a = steady_state(params).alpha
    J, gp = params.J, params.gamma_plus
    # [[g_+, 2J], [2J, g_+]] (kappa2, u) = (s_y - a2, n - a4); det = -omega^2
    kappa2, u = np.linalg.solve([[gp, 2 * J], [2 * J, gp]], [s[1] - a[1], s[3] - a[3]])
    v = (s[2] - a[2]) / omega
    k3 = math.hypot(u, v)
    k4 = math.atan2(v, u) if k3 > 0 else 0.0
    if k4 == -math.pi:
        k4 = math.pi
    return KappaParams(float(s[0]), float(kappa2), k3, k4)


def analytic_solution(kappa: KappaParams, params: SystemParams, t_grid) -> np.ndarray:
    """``(s_x, s_y, s_z, n)`` on ``t_grid``, shape ``(T, 4)``."""
    omega = _require_oscillatory(params)
    t = np.asarray(t_grid, dtype=float)
    a = steady_state(params).alpha
    J, gm, gp = params.J, params.gamma_minus, params.gamma_plus
    k1, k2, k3, k4 = kappa.kappa1, kappa.kappa2, kappa.kappa3, kappa.kappa4
    damp = np.exp(-gm * t)
    c = k3 * np.cos(omega * t - k4)
    out = np.empty(t.shape + (4,))
    out[..., 0] = k1 * damp
    out[..., 1] = a[1] + (gp * k2 + 2 * J * c) * damp
    out[..., 2] = a[2] - omega * k3 * np.sin(omega * t - k4) * damp
    out[..., 3] = a[3] + (2 * J * k2 + gp * c) * damp
    return out


def purity(moments: np.ndarray) -> np.ndarray:
    m = np.asarray(moments)
    return np.sum(m[..., :3] ** 2, axis=-1) / m[..., 3] ** 2


def envelopes(kappa: KappaParams, params: SystemParams, t_grid) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper purity envelopes.

    Obtained from the purity by replacing ``kappa3 cos(omega t - kappa4)``
    with ``-|kappa3|`` (lower) and ``+|kappa3|`` (upper) and dropping the
    fast ``sin`` term of ``s_z``.
    """
    _require_oscillatory(params)
    t = np.asarray(t_grid, dtype=float)
    a = steady_state(params).alpha
    J, gm, gp = params.J, params.gamma_minus, params.gamma_plus
    k1, k2, k3 = kappa.kappa1, kappa.kappa2, abs(kappa.kappa3)
    grow = np.exp(gm * t)
    out = []
    for sign in (-1.0, 1.0):
        num = k1 ** 2 + (a[1] * grow + gp * k2 + sign * 2 * J * k3) ** 2 + (a[2] * grow) ** 2
        root = a[3] * grow + 2 * J * k2 + sign * gp * k3
        scale = np.abs(a[3] * grow) + abs(2 * J * k2) + gp * k3
        # a root at rounding level of its terms counts as vanishing
        if np.any(np.abs(root) <= 1e-12 * np.maximum(scale, 1e-300)):
            raise SingularEnvelopeError("envelope denominator vanishes on the time grid")
        out.append(num / root ** 2)
    return out[0], out[1]


__all__ = ["KappaParams", "SteadyState", "steady_state", "solve_kappas", "analytic_solution",
           "envelopes", "purity", "UnsupportedRegimeError", "NoSteadyStateError",
           "SingularEnvelopeError"]
