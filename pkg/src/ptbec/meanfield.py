"""Mean-field limit: the discrete Gross-Pitaevskii equation of the dimer.

    i c1' = -J c2 + g |c1|^2 c1 - (i gamma / 2) c1
    i c2' = -J c1 + g |c2|^2 c2 + (i gamma / 2) c2

with ``gamma`` the loss rate. The amplitudes start normalized; gain and loss
change the norm, which is tracked rather than projected out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import ode
from .bbr import DIVERGENCE_FACTOR, MAX_STEPS, RTOL
from .core import ParameterError, SystemParams, mode_angles, mode_coefficients


class BeyondExceptionalPointError(ParameterError):
    pass


@dataclass(frozen=True)
class MeanFieldState:
    c1: complex
    c2: complex

    def __post_init__(self):
        object.__setattr__(self, "c1", complex(self.c1))
        object.__setattr__(self, "c2", complex(self.c2))

    @property
    def norm2(self) -> float:
        return abs(self.c1) ** 2 + abs(self.c2) ** 2

    def angles(self) -> tuple[float, float]:
        """Bloch angles ``(phi, theta)`` of the normalized state."""
        return mode_angles(self.c1, self.c2)

    @classmethod
    def from_angles(cls, phi: float, theta: float) -> "MeanFieldState":
        return cls(*mode_coefficients(phi, theta))

    def as_real(self) -> np.ndarray:
        return np.array([self.c1.real, self.c1.imag, self.c2.real, self.c2.imag], dtype=float)

    @classmethod
    def from_real(cls, y) -> "MeanFieldState":
        return cls(complex(y[0], y[1]), complex(y[2], y[3]))


@njit(cache=True)
def gpe_rhs(t, y, a, out):
    J, g, gam = a[0], a[1], a[2]
    x1, y1, x2, y2 = y[0], y[1], y[2], y[3]
    n1 = x1 * x1 + y1 * y1
    n2 = x2 * x2 + y2 * y2
    # c' = -i F(c): F1 = -J c2 + g n1 c1 - i gam/2 c1, F2 = -J c1 + g n2 c2 + i gam/2 c2
    f1r = -J * x2 + g * n1 * x1 + 0.5 * gam * y1
    f1i = -J * y2 + g * n1 * y1 - 0.5 * gam * x1
    f2r = -J * x1 + g * n2 * x2 - 0.5 * gam * y2
    f2i = -J * y1 + g * n2 * y2 + 0.5 * gam * x2
    out[0] = f1i
    out[1] = -f1r
    out[2] = f2i
    out[3] = -f2r


@njit(cache=True)
def _norm_guard(y):
    v = y[0] * y[0] + y[1] * y[1] + y[2] * y[2] + y[3] * y[3]
    return v if np.isfinite(v) else np.inf


def _args(params: SystemParams) -> np.ndarray:
    return np.array([params.J, params.g, params.gamma_loss])


def gpe_derivative(c: MeanFieldState, params: SystemParams) -> MeanFieldState:
    out = np.empty(4)
    gpe_rhs(0.0, c.as_real(), _args(params), out)
    return MeanFieldState.from_real(out)


@dataclass
class GPESeries:
    """Integrated amplitudes; ``c`` has shape ``(T, 2)`` and is NaN after a divergence."""

    t: np.ndarray
    c: np.ndarray
    status: int
    t_stop: float

    @property
    def stable(self) -> bool:
        return self.status != ode.DIVERGED

    @property
    def norm2(self) -> np.ndarray:
        return np.sum(np.abs(self.c) ** 2, axis=1)

    @property
    def abs_raw(self) -> np.ndarray:
        return np.abs(self.c)

    @property
    def abs_normalized(self) -> np.ndarray:
        """``|c_j| / ||c||``, the counterpart of ``sqrt(<n_j> / n)``."""
        return np.abs(self.c) / np.sqrt(self.norm2)[:, None]

    @property
    def relative_phase(self) -> np.ndarray:
        return np.angle(self.c[:, 0] * np.conj(self.c[:, 1]))

    @property
    def angles(self) -> np.ndarray:
        """``(phi, theta)`` per sample."""
        out = np.full((self.t.size, 2), np.nan)
        for i, (c1, c2) in enumerate(self.c):
            if np.isfinite(c1) and np.isfinite(c2):
                out[i] = mode_angles(c1, c2)
        return out


def integrate_gpe(c0: MeanFieldState, t_grid, params: SystemParams, *, rtol: float = RTOL,
                  atol: float = 1e-9, divergence_factor: float = DIVERGENCE_FACTOR) -> GPESeries:
    """Integrate with the same Dormand-Prince scheme and tolerances as the moment equations.

    The divergence bound applies to the squared norm relative to its initial value.
    """
    t_grid = np.ascontiguousarray(t_grid, dtype=float)
    y0 = c0.as_real()
    Y, status, t_stop, _ = ode.dopri5(gpe_rhs, _norm_guard, y0, t_grid, _args(params),
                                      rtol, atol, divergence_factor * max(c0.norm2, 1e-300),
                                      MAX_STEPS)
    if status in (ode.STEP_UNDERFLOW, ode.MAX_STEPS):
        raise ode.IntegrationError(f"GPE integration stopped at t={t_stop}: "
                                   f"{ode.STATUS_NAMES[status]}")
    c = Y[:, 0::2] + 1j * Y[:, 1::2]
    return GPESeries(t_grid, c, int(status), float(t_stop))


def gpe_moments(series: GPESeries, N0: float) -> np.ndarray:
    """``(s_x, s_y, s_z, n)`` of ``N0`` particles condensed in the integrated mode.

    Follows the product-state convention: ``s_x + i s_y = 2 N0 c1 c2*`` and
    ``s_z = N0 (|c2|^2 - |c1|^2)``.
    """
    c1, c2 = series.c[:, 0], series.c[:, 1]
    z = 2 * N0 * c1 * np.conj(c2)
    return np.stack([z.real, z.imag, N0 * (np.abs(c2) ** 2 - np.abs(c1) ** 2),
                     N0 * (np.abs(c1) ** 2 + np.abs(c2) ** 2)], axis=1)


def stationary_states(params: SystemParams) -> tuple[MeanFieldState, MeanFieldState]:
    """PT-symmetric stationary states ``(ground, excited)`` at unit norm.

    Their Bloch angles are ``theta = pi/2`` and ``phi = pi/2 - acos(gamma/2J)``
    (ground) or ``pi/2 + acos(gamma/2J)`` (excited).
    """
    J, gam = params.J, params.gamma_loss
    if abs(gam) > 2 * J:
        raise BeyondExceptionalPointError(
            f"|gamma| = {abs(gam)} > 2J = {2 * J}: no PT-symmetric stationary states")
    a = math.asin(gam / (2 * J)) if J > 0 else 0.0
    r = 1 / math.sqrt(2)
    ground = MeanFieldState(r * complex(math.cos(a), math.sin(a)), r)
    excited = MeanFieldState(-r * complex(math.cos(a), -math.sin(a)), r)
    return ground, excited


def stationary_angles(params: SystemParams) -> tuple[tuple[float, float], tuple[float, float]]:
    """``((phi_g, theta_g), (phi_e, theta_e))`` of the stationary states."""
    J, gam = params.J, params.gamma_loss
    if abs(gam) > 2 * J:
        raise BeyondExceptionalPointError(
            f"|gamma| = {abs(gam)} > 2J = {2 * J}: no PT-symmetric stationary states")
    b = math.acos(gam / (2 * J))
    return (math.pi / 2 - b, math.pi / 2), (math.pi / 2 + b, math.pi / 2)


__all__ = ["MeanFieldState", "gpe_derivative", "integrate_gpe", "GPESeries", "gpe_moments",
           "stationary_states", "stationary_angles", "BeyondExceptionalPointError"]
