"""Bogoliubov backreaction: moment hierarchy closed at second order.

Two code paths describe the same equations. The general form evolves the
single-particle density matrix ``sigma[j, k] = <a_j^dag a_k>`` and the
covariance tensor ``Delta[j, k, l, m]`` of an open ``M``-site chain with
arbitrary per-site gain and loss. The Bloch form is its two-site
specialization in terms of ``s = 2 <L>``, ``n`` and the ten symmetrized
covariances of ``(L_x, L_y, L_z, n)``.

Moment vectors are laid out as ``(s_x, s_y, s_z, n, Delta_xx, Delta_yy,
Delta_zz, Delta_xy, Delta_xz, Delta_yz, Delta_xn, Delta_yn, Delta_zn,
Delta_nn)``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numba import njit

from . import ode
from .core import COV_NAMES, COV_PAIRS, SystemParams, product_state_moments

MOMENT_NAMES = ("sx", "sy", "sz", "n") + tuple("D" + c for c in COV_NAMES)

RTOL = 1e-11
ATOL_PER_PARTICLE = 1e-11
DIVERGENCE_FACTOR = 1e4
MAX_STEPS = 50_000_000


@dataclass(frozen=True)
class BlochMoments:
    s_x: float
    s_y: float
    s_z: float
    n: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s_x, self.s_y, self.s_z, self.n])

    @classmethod
    def from_array(cls, a) -> "BlochMoments":
        return cls(*(float(v) for v in a[:4]))


@dataclass(frozen=True)
class CovarianceSet:
    xx: float
    yy: float
    zz: float
    xy: float
    xz: float
    yz: float
    xn: float
    yn: float
    zn: float
    nn: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def from_array(cls, a) -> "CovarianceSet":
        return cls(*(float(v) for v in a[:10]))

    @classmethod
    def zeros(cls) -> "CovarianceSet":
        return cls(*([0.0] * 10))

    def matrix(self) -> np.ndarray:
        """Symmetric 4x4 matrix over ``(L_x, L_y, L_z, n)``."""
        out = np.empty((4, 4))
        for v, (j, k) in zip(self.as_array(), COV_PAIRS):
            out[j, k] = out[k, j] = v
        return out


@dataclass
class GeneralMoments:
    """``sigma`` (M x M) and ``delta`` (M x M x M x M), both complex."""

    sigma: np.ndarray
    delta: np.ndarray

    @property
    def M(self) -> int:
        return self.sigma.shape[0]

    def pack(self) -> np.ndarray:
        z = np.concatenate([self.sigma.ravel(), self.delta.ravel()])
        return np.concatenate([z.real, z.imag])

    @classmethod
    def unpack(cls, y: np.ndarray, M: int) -> "GeneralMoments":
        half = y.size // 2
        z = y[:half] + 1j * y[half:]
        return cls(z[:M * M].reshape(M, M).copy(), z[M * M:].reshape(M, M, M, M).copy())

    def symmetry_residual(self) -> float:
        """Largest violation of the two covariance symmetry relations."""
        s, d = self.sigma, self.delta
        M = self.M
        eye = np.eye(M)
        conj = np.abs(d - np.conj(d.transpose(3, 2, 1, 0))).max()
        # Delta_jklm - Delta_lmjk + delta_jm sigma_lk - delta_lk sigma_jm
        shift = (d - d.transpose(2, 3, 0, 1)
                 + np.einsum("jm,lk->jklm", eye, s) - np.einsum("lk,jm->jklm", eye, s))
        herm = np.abs(s - s.conj().T).max()
        return float(max(conj, np.abs(shift).max(), herm))


# single-particle matrices of L_x, L_y, L_z, n in A = sum_jk M_jk a_j^dag a_k
_BLOCH_MATRICES = (
    np.array([[0, 0.5], [0.5, 0]], dtype=complex),
    np.array([[0, 0.5j], [-0.5j, 0]], dtype=complex),
    np.diag([-0.5, 0.5]).astype(complex),
    np.eye(2, dtype=complex),
)


def bloch_from_general(m: GeneralMoments) -> np.ndarray:
    """Fourteen Bloch moments of a two-site ``GeneralMoments``.

    Linear in ``(sigma, delta)``, so it also maps derivatives.
    """
    if m.M != 2:
        raise ValueError("Bloch form needs M = 2")
    s, d = m.sigma, m.delta
    mean = [np.einsum("jk,jk->", A, s).real for A in _BLOCH_MATRICES]
    out = np.empty(14)
    out[:3] = 2 * np.array(mean[:3])
    out[3] = mean[3]
    for i, (a, b) in enumerate(COV_PAIRS):
        A, B = _BLOCH_MATRICES[a], _BLOCH_MATRICES[b]
        out[4 + i] = (np.einsum("ij,kl,ijkl->", A, B, d)
                      + np.einsum("ij,kl,klij->", A, B, d)).real
    return out


def general_from_bloch(y: np.ndarray) -> GeneralMoments:
    """Inverse of :func:`bloch_from_general`.

    Only the part of ``delta`` symmetric under ``(jk) <-> (lm)`` is seen by the
    Bloch covariances; the antisymmetric part is fixed by ``sigma`` through the
    commutation relations.
    """
    sx, sy, sz, n = y[:4]
    s12 = 0.5 * (sx - 1j * sy)
    sigma = np.array([[0.5 * (n - sz), s12], [np.conj(s12), 0.5 * (n + sz)]])
    # cov[a, b] = 2 sum_pq vec(A_a)[p] vec(A_b)[q] S[p, q] over pairs p = (j, k)
    cov = CovarianceSet.from_array(y[4:]).matrix()
    Binv = np.linalg.inv(np.array([A.ravel() for A in _BLOCH_MATRICES]))
    S = Binv @ (0.5 * cov) @ Binv.T
    S = S.reshape(2, 2, 2, 2)
    eye = np.eye(2)
    anti = 0.5 * (-np.einsum("jm,lk->jklm", eye, sigma) + np.einsum("lk,jm->jklm", eye, sigma))
    return GeneralMoments(sigma, S + anti)


@njit(cache=True)
def _general_rhs_raw(sig, D, J, U, gl, gg, dsig, dD):
    M = sig.shape[0]
    for j in range(M):
        for k in range(M):
            hop = 0j
            if j + 1 < M:
                hop += sig[j + 1, k]
            if j - 1 >= 0:
                hop += sig[j - 1, k]
            if k + 1 < M:
                hop -= sig[j, k + 1]
            if k - 1 >= 0:
                hop -= sig[j, k - 1]
            v = -1j * J * hop
            v += -1j * U * (sig[k, k] * sig[j, k] - sig[j, j] * sig[j, k]
                            + D[j, k, k, k] - D[j, j, j, k])
            v -= 0.5 * (gl[j] + gl[k]) * sig[j, k]
            v += 0.5 * (gg[j] + gg[k]) * (sig[j, k] + (1.0 if j == k else 0.0))
            dsig[j, k] = v
    for j in range(M):
        for k in range(M):
            for l in range(M):
                for m in range(M):
                    hop = 0j
                    if j + 1 < M:
                        hop += D[j + 1, k, l, m]
                    if j - 1 >= 0:
                        hop += D[j - 1, k, l, m]
                    if k + 1 < M:
                        hop -= D[j, k + 1, l, m]
                    if k - 1 >= 0:
                        hop -= D[j, k - 1, l, m]
                    if l + 1 < M:
                        hop += D[j, k, l + 1, m]
                    if l - 1 >= 0:
                        hop += D[j, k, l - 1, m]
                    if m + 1 < M:
                        hop -= D[j, k, l, m + 1]
                    if m - 1 >= 0:
                        hop -= D[j, k, l, m - 1]
                    v = -1j * J * hop
                    v += 1j * U * (D[j, k, l, m] * (sig[j, j] - sig[k, k] + sig[l, l] - sig[m, m])
                                   + D[j, j, l, m] * sig[j, k] - D[k, k, l, m] * sig[j, k]
                                   + D[j, k, l, l] * sig[l, m] - D[j, k, m, m] * sig[l, m])
                    v -= 0.5 * (gl[j] + gl[k] + gl[l] + gl[m]) * D[j, k, l, m]
                    if k == l:
                        v += gl[k] * sig[j, m]
                    v += 0.5 * (gg[j] + gg[k] + gg[l] + gg[m]) * D[j, k, l, m]
                    if j == m:
                        v += gg[j] * (sig[l, k] + (1.0 if l == k else 0.0))
                    dD[j, k, l, m] = v


@njit(cache=True)
def _make_consistent(dsig, dD):
    # keep the (jk)<->(lm) symmetric part of dD, rebuild the rest from dsig
    M = dsig.shape[0]
    out = np.empty_like(dD)
    for j in range(M):
        for k in range(M):
            for l in range(M):
                for m in range(M):
                    v = 0.5 * (dD[j, k, l, m] + dD[l, m, j, k])
                    if j == m:
                        v -= 0.5 * dsig[l, k]
                    if l == k:
                        v += 0.5 * dsig[j, m]
                    out[j, k, l, m] = v
    return out


def bbr_derivative_general(m: GeneralMoments, gamma_loss_sites, gamma_gain_sites,
                           params: SystemParams, consistent: bool = True) -> GeneralMoments:
    """Time derivative of the M-site moments with per-site gain and loss rates.

    ``J`` and ``U`` are taken from ``params``; the chain is open (shift terms
    leaving ``[0, M)`` are dropped). With ``consistent=False`` every tensor
    entry carries its own closed-form derivative. The third-order closure
    breaks the commutation symmetry of those raw derivatives, so the default
    evolves only the symmetric part of ``delta`` and rebuilds the remainder from
    ``dsigma``; both choices give the same Bloch-form derivative.
    """
    M = m.M
    gl = np.asarray(gamma_loss_sites, dtype=float)
    gg = np.asarray(gamma_gain_sites, dtype=float)
    if M < 2 or gl.shape != (M,) or gg.shape != (M,):
        raise ValueError("need M >= 2 and one loss/gain rate per site")
    dsig = np.empty((M, M), dtype=complex)
    dD = np.empty((M,) * 4, dtype=complex)
    _general_rhs_raw(np.ascontiguousarray(m.sigma, dtype=complex),
                     np.ascontiguousarray(m.delta, dtype=complex),
                     params.J, params.U, gl, gg, dsig, dD)
    if consistent:
        dD = _make_consistent(dsig, dD)
    return GeneralMoments(dsig, dD)


def dimer_site_rates(params: SystemParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-site (loss, gain) rates of the dimer: loss at site 1, gain at site 2."""
    return np.array([params.gamma_loss, 0.0]), np.array([0.0, params.gamma_gain])


@njit(cache=True)
def bloch_rhs(t, y, a, out):
    """Bloch-form right-hand side. ``a = (J, U, gamma_-, gamma_+, gamma_gain, neglect)``."""
    J, U, gm, gp, gg = a[0], a[1], a[2], a[3], a[4]
    neglect = a[5] != 0.0
    sx, sy, sz, n = y[0], y[1], y[2], y[3]
    if neglect:
        out[0] = -U * sy * sz - gm * sx
        out[1] = 2 * J * sz + U * sx * sz - gm * sy
        out[2] = -2 * J * sy + gp * n - gm * sz + gg
        out[3] = -gm * n + gp * sz + gg
        for i in range(4, y.size):
            out[i] = 0.0
        return
    xx, yy, zz, xy, xz, yz = y[4], y[5], y[6], y[7], y[8], y[9]
    xn, yn, zn, nn = y[10], y[11], y[12], y[13]
    out[0] = -U * (sy * sz + 2 * yz) - gm * sx
    out[1] = 2 * J * sz + U * (sx * sz + 2 * xz) - gm * sy
    out[2] = -2 * J * sy + gp * n - gm * sz + gg
    out[3] = -gm * n + gp * sz + gg
    out[4] = -2 * U * (sz * xy + sy * xz) - gm * (2 * xx - sz / 2) + gp * n / 2 + gg / 2
    out[5] = (4 * J * yz + 2 * U * (sz * xy + sx * yz) - gm * (2 * yy - sz / 2)
              + gp * n / 2 + gg / 2)
    out[6] = -4 * J * yz - gm * (2 * zz + sz / 2) + gp * (zn + n / 2) + gg / 2
    out[7] = 2 * J * xz + U * (sx * xz + sz * xx - sz * yy - sy * yz) - 2 * gm * xy
    out[8] = -2 * J * xy - U * (sy * zz + sz * yz) - gm * (2 * xz + sx / 2) + gp * xn / 2
    out[9] = (2 * J * (zz - yy) + U * (sx * zz + sz * xz) - gm * (2 * yz + sy / 2)
              + gp * yn / 2)
    out[10] = -U * (sz * yn + sy * zn) - 2 * gm * xn + gp * (2 * xz + sx)
    out[11] = 2 * J * zn + U * (sx * zn + sz * xn) - 2 * gm * yn + gp * (2 * yz + sy)
    out[12] = -2 * J * yn - gm * (2 * zn + n) + gp * (2 * zz + nn / 2 + sz) + gg
    out[13] = -gm * (2 * nn + 2 * sz) + gp * (4 * zn + 2 * n) + 2 * gg


@njit(cache=True)
def _particle_guard(y):
    v = abs(y[3])
    return v if np.isfinite(v) else np.inf


def _bloch_args(params: SystemParams, neglect: bool = False) -> np.ndarray:
    return np.array([params.J, params.U, params.gamma_minus, params.gamma_plus,
                     params.gamma_gain, 1.0 if neglect else 0.0])


def bbr_derivative_bloch(s: BlochMoments, d: CovarianceSet,
                         params: SystemParams) -> tuple[BlochMoments, CovarianceSet]:
    y = np.concatenate([s.as_array(), d.as_array()])
    out = np.empty(14)
    bloch_rhs(0.0, y, _bloch_args(params), out)
    return BlochMoments.from_array(out[:4]), CovarianceSet.from_array(out[4:])


def pure_initial_moments(phi: float, theta: float, N0: int) -> tuple[BlochMoments, CovarianceSet]:
    """Moments of the ``N0``-particle product state with Bloch angles ``(phi, theta)``."""
    y = product_state_moments(phi, theta, N0)
    return BlochMoments.from_array(y[:4]), CovarianceSet.from_array(y[4:])


@dataclass
class BBRSeries:
    """Moment time series. ``moments`` has shape ``(len(t), 14)``."""

    t: np.ndarray
    moments: np.ndarray
    mode: str
    status: int
    t_stop: float
    n_steps: int

    @property
    def stable(self) -> bool:
        return self.status != ode.DIVERGED

    @property
    def ok(self) -> bool:
        return self.status == ode.OK

    @property
    def s(self) -> np.ndarray:
        return self.moments[:, :3]

    @property
    def n(self) -> np.ndarray:
        return self.moments[:, 3]

    @property
    def purity(self) -> np.ndarray:
        return np.sum(self.moments[:, :3] ** 2, axis=1) / self.moments[:, 3] ** 2


def integrate_bbr(initial, t_grid, params: SystemParams, mode: str = "full", *,
                  rtol: float = RTOL, atol: float | None = None,
                  divergence_factor: float = DIVERGENCE_FACTOR) -> BBRSeries:
    """Integrate the Bloch-form equations and sample them on ``t_grid``.

    ``initial`` is a ``(BlochMoments, CovarianceSet)`` pair or a
    14-vector. ``mode`` is ``"full"`` or ``"neglect"``; in neglect mode the
    covariances are dropped from the first-order equations and their columns
    are NaN. A particle number above ``divergence_factor * N0`` stops the run
    with status ``DIVERGED`` instead of raising.
    """
    if mode not in ("full", "neglect"):
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(initial, tuple):
        y0 = np.concatenate([initial[0].as_array(), initial[1].as_array()])
    else:
        y0 = np.array(initial, dtype=float)
    if y0.shape != (14,):
        raise ValueError("initial moments must have 14 entries")
    neglect = mode == "neglect"
    t_grid = np.ascontiguousarray(t_grid, dtype=float)
    if atol is None:
        atol = ATOL_PER_PARTICLE * params.N0
    Y, status, t_stop, steps = ode.dopri5(
        bloch_rhs, _particle_guard, y0, t_grid, _bloch_args(params, neglect),
        rtol, atol, divergence_factor * params.N0, MAX_STEPS)
    if status in (ode.STEP_UNDERFLOW, ode.MAX_STEPS):
        raise ode.IntegrationError(f"BBR integration stopped at t={t_stop}: "
                                   f"{ode.STATUS_NAMES[status]}")
    if neglect:
        Y[:, 4:] = np.nan
    return BBRSeries(t_grid, Y, mode, int(status), float(t_stop), int(steps))


@njit(cache=True)
def _general_packed_rhs(t, y, a, out):
    M = int(a[0])
    J, U = a[1], a[2]
    gl = a[3:3 + M]
    gg = a[3 + M:3 + 2 * M]
    half = y.size // 2
    z = y[:half] + 1j * y[half:]
    sig = z[:M * M].reshape((M, M))
    D = z[M * M:].reshape((M, M, M, M))
    dsig = np.empty((M, M), dtype=np.complex128)
    dD = np.empty((M, M, M, M), dtype=np.complex128)
    _general_rhs_raw(sig, D, J, U, gl, gg, dsig, dD)
    dD = _make_consistent(dsig, dD)
    k = 0
    for j in range(M):
        for l in range(M):
            out[k] = dsig[j, l].real
            out[half + k] = dsig[j, l].imag
            k += 1
    for v in dD.ravel():
        out[k] = v.real
        out[half + k] = v.imag
        k += 1


@njit(cache=True)
def _finite_guard(y):
    for v in y:
        if not np.isfinite(v):
            return np.inf
    return 0.0


def integrate_general(m0: GeneralMoments, t_grid, gamma_loss_sites, gamma_gain_sites,
                      params: SystemParams, *, rtol: float = RTOL,
                      atol: float | None = None) -> list[GeneralMoments]:
    """Integrate the M-site equations; returns the moments at each time."""
    M = m0.M
    args = np.concatenate([[M, params.J, params.U],
                           np.asarray(gamma_loss_sites, float), np.asarray(gamma_gain_sites, float)])
    if atol is None:
        atol = ATOL_PER_PARTICLE * max(1.0, float(np.trace(m0.sigma).real))
    t_grid = np.ascontiguousarray(t_grid, dtype=float)
    Y, status, t_stop, _ = ode.dopri5(_general_packed_rhs, _finite_guard, m0.pack(), t_grid,
                                      args, rtol, atol, np.inf, MAX_STEPS)
    if status != ode.OK:
        raise ode.IntegrationError(f"general integration failed at t={t_stop}: "
                                   f"{ode.STATUS_NAMES[status]}")
    return [GeneralMoments.unpack(row, M) for row in Y]
