"""Parameters, truncated two-mode Fock space and pure product states.

Basis labels are ``(n1, n2)`` = (occupation of site 1, occupation of site 2).
Site 1 carries the loss, site 2 the gain. All quantities are in units of the
tunneling rate ``J`` with hbar = 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln


class ParameterError(ValueError):
    """Raised for unphysical or inconsistent system parameters."""


class TruncationError(RuntimeError):
    """Raised when the Fock cutoff is too small for the requested state or run."""


class TruncationWarning(RuntimeWarning):
    pass


# top-shell probability thresholds of the truncation monitor
TRUNCATION_WARN = 1e-8
TRUNCATION_ABORT = 1e-4


@dataclass(frozen=True)
class SystemParams:
    J: float
    U: float
    g: float
    N0: int
    gamma_loss: float
    gamma_gain: float

    @property
    def gamma_minus(self) -> float:
        return 0.5 * (self.gamma_loss - self.gamma_gain)

    @property
    def gamma_plus(self) -> float:
        return 0.5 * (self.gamma_loss + self.gamma_gain)

    @property
    def gamma(self) -> float:
        """Gain-loss strength, identified with the loss rate."""
        return self.gamma_loss

    @property
    def omega(self) -> float:
        """Frequency of the linear oscillations, ``sqrt(4J^2 - gamma_+^2)``.

        NaN outside the oscillatory regime.
        """
        d = 4.0 * self.J ** 2 - self.gamma_plus ** 2
        return math.sqrt(d) if d > 0 else float("nan")

    def replace(self, **changes) -> "SystemParams":
        """Rebuild through :func:`make_params` with some arguments changed.

        Accepts the ``make_params`` keywords (``J, g, N0, gamma_loss,
        balanced``) plus an explicit ``gamma_gain`` for unbalanced runs.
        """
        kw = dict(J=self.J, g=self.g, N0=self.N0, gamma_loss=self.gamma_loss)
        gain = changes.pop("gamma_gain", None)
        balanced = changes.pop("balanced", gain is None and self.is_balanced)
        kw.update(changes)
        if gain is None and not balanced:
            gain = self.gamma_gain
        return make_params(balanced=balanced, gamma_gain=gain, **kw)

    @property
    def is_balanced(self) -> bool:
        return math.isclose(self.gamma_gain, self.gamma_loss * self.N0 / (self.N0 + 2),
                            rel_tol=1e-14, abs_tol=1e-300)

    def as_dict(self) -> dict:
        return {
            "J": self.J, "U": self.U, "g": self.g, "N0": self.N0,
            "gamma_loss": self.gamma_loss, "gamma_gain": self.gamma_gain,
            "gamma_minus": self.gamma_minus, "gamma_plus": self.gamma_plus,
        }


def make_params(J: float = 1.0, g: float = 0.0, N0: int = 100,
                gamma_loss: float = 0.0, balanced: bool = True,
                gamma_gain: float | None = None) -> SystemParams:
    """Build a parameter set from the macroscopic interaction ``g``.

    The on-site interaction is ``U = g / (N0 - 1)``. With ``balanced`` the gain
    rate is tied to the loss rate by ``gamma_gain = gamma_loss * N0 / (N0 + 2)``;
    otherwise ``gamma_gain`` must be given explicitly.
    """
    if isinstance(N0, float):
        if not N0.is_integer():
            raise ParameterError(f"N0 must be an integer, got {N0}")
        N0 = int(N0)
    if N0 < 1:
        raise ParameterError(f"N0 must be >= 1, got {N0}")
    if gamma_loss < 0:
        raise ParameterError(f"gamma_loss must be >= 0, got {gamma_loss}")
    if J < 0:
        raise ParameterError(f"J must be >= 0, got {J}")
    if N0 == 1:
        if g != 0:
            raise ParameterError("g must be 0 for N0 = 1 (U is undefined)")
        U = 0.0
    else:
        U = g / (N0 - 1)
    if balanced:
        if gamma_gain is not None:
            raise ParameterError("gamma_gain is derived when balanced=True")
        gamma_gain = gamma_loss * N0 / (N0 + 2)
    elif gamma_gain is None:
        raise ParameterError("gamma_gain is required when balanced=False")
    if gamma_gain < 0:
        raise ParameterError(f"gamma_gain must be >= 0, got {gamma_gain}")
    return SystemParams(J=float(J), U=float(U), g=float(g), N0=N0,
                        gamma_loss=float(gamma_loss), gamma_gain=float(gamma_gain))


def default_n_max(N0: int) -> int:
    """Per-mode cutoff used for gain-bearing runs."""
    return int(math.ceil(2.5 * N0)) + 10


@dataclass(frozen=True)
class FockBasis:
    """Product basis ``|n1, n2>`` with ``0 <= n1, n2 <= n_max``.

    Dense index is ``n1 * (n_max + 1) + n2``.
    """

    n_max: int

    def __post_init__(self):
        if self.n_max < 0:
            raise ValueError("n_max must be nonnegative")

    @property
    def dim(self) -> int:
        return (self.n_max + 1) ** 2

    def index(self, n1: int, n2: int) -> int:
        if not (0 <= n1 <= self.n_max and 0 <= n2 <= self.n_max):
            raise IndexError(f"label ({n1}, {n2}) outside cutoff {self.n_max}")
        return n1 * (self.n_max + 1) + n2

    def label(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.dim:
            raise IndexError(index)
        return divmod(index, self.n_max + 1)

    @cached_property
    def occupations(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``(n1, n2)`` over dense indices."""
        n1, n2 = np.divmod(np.arange(self.dim), self.n_max + 1)
        return n1, n2

    @cached_property
    def top_shell(self) -> np.ndarray:
        n1, n2 = self.occupations
        return (n1 == self.n_max) | (n2 == self.n_max)

    @cached_property
    def a1(self) -> sp.csr_matrix:
        """Annihilator at site 1."""
        n1, n2 = self.occupations
        keep = n1 > 0
        rows = (n1[keep] - 1) * (self.n_max + 1) + n2[keep]
        return sp.csr_matrix((np.sqrt(n1[keep]).astype(complex), (rows, np.flatnonzero(keep))),
                             shape=(self.dim, self.dim))

    @cached_property
    def a2(self) -> sp.csr_matrix:
        """Annihilator at site 2."""
        n1, n2 = self.occupations
        keep = n2 > 0
        rows = n1[keep] * (self.n_max + 1) + n2[keep] - 1
        return sp.csr_matrix((np.sqrt(n2[keep]).astype(complex), (rows, np.flatnonzero(keep))),
                             shape=(self.dim, self.dim))

    @cached_property
    def bloch_operators(self) -> tuple[sp.csr_matrix, ...]:
        """Sparse ``(L_x, L_y, L_z, n)``."""
        a1, a2 = self.a1, self.a2
        hop = (a1.getH() @ a2).tocsr()
        n1, n2 = self.occupations
        Lx = 0.5 * (hop + hop.getH())
        Ly = 0.5j * (hop - hop.getH())
        Lz = sp.diags(0.5 * (n2 - n1).astype(complex), format="csr")
        n = sp.diags((n1 + n2).astype(complex), format="csr")
        return tuple(m.tocsr() for m in (Lx, Ly, Lz, n))

    def hamiltonian(self, params: SystemParams) -> sp.csr_matrix:
        """Bose-Hubbard dimer Hamiltonian in this basis."""
        hop = self.a1.getH() @ self.a2
        n1, n2 = self.occupations
        onsite = 0.5 * params.U * (n1 * (n1 - 1) + n2 * (n2 - 1))
        return (-params.J * (hop + hop.getH()) + sp.diags(onsite.astype(complex))).tocsr()


@dataclass
class FockVector:
    basis: FockBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (self.basis.dim,):
            raise ValueError(f"expected {self.basis.dim} amplitudes, got {self.amplitudes.shape}")

    @property
    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def normalized(self) -> "FockVector":
        nrm = math.sqrt(self.norm2)
        if nrm == 0:
            raise ValueError("cannot normalize the zero vector")
        return FockVector(self.basis, self.amplitudes / nrm)

    def density_matrix(self, sparse: bool = False) -> "DensityMatrix":
        if sparse:
            v = sp.csr_matrix(self.amplitudes.reshape(-1, 1))
            return DensityMatrix(self.basis, v @ v.getH())
        return DensityMatrix(self.basis, np.outer(self.amplitudes, self.amplitudes.conj()))

    def top_shell_probability(self) -> float:
        return float(np.sum(np.abs(self.amplitudes[self.basis.top_shell]) ** 2))


@dataclass
class DensityMatrix:
    """Density operator on a :class:`FockBasis`.

    ``entries`` is a dense array or a scipy sparse matrix; the sparse form is
    used for number-block-diagonal states on large bases.
    """

    basis: FockBasis
    entries: np.ndarray | sp.spmatrix

    def __post_init__(self):
        if sp.issparse(self.entries):
            self.entries = sp.csr_matrix(self.entries, dtype=complex)
        else:
            self.entries = np.asarray(self.entries, dtype=complex)
        d = self.basis.dim
        if self.entries.shape != (d, d):
            raise ValueError(f"expected ({d}, {d}) matrix, got {self.entries.shape}")

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.entries)

    def diagonal(self) -> np.ndarray:
        return np.asarray(self.entries.diagonal()).real

    @property
    def trace(self) -> float:
        return float(self.entries.diagonal().sum().real)

    def top_shell_probability(self) -> float:
        return float(self.diagonal()[self.basis.top_shell].sum())

    def hermiticity_residual(self) -> float:
        diff = self.entries - self.entries.conj().T
        return float(abs(diff).max())

    def min_eigenvalue(self) -> float:
        """Smallest eigenvalue; sparse (block-diagonal in N) states are done sector by sector."""
        if not self.is_sparse:
            return float(np.linalg.eigvalsh(0.5 * (self.entries + self.entries.conj().T))[0])
        m = self.entries
        out = np.inf
        for idx in sector_indices(self.basis.n_max):
            blk = m[idx][:, idx].toarray()
            out = min(out, float(np.linalg.eigvalsh(0.5 * (blk + blk.conj().T))[0]))
        return out

    def dense(self) -> np.ndarray:
        return self.entries.toarray() if self.is_sparse else self.entries


def sector_indices(n_max: int) -> list[np.ndarray]:
    """Dense indices of each total-number sector ``N = 0 .. 2 n_max``, ``n1`` ascending."""
    out = []
    for N in range(2 * n_max + 1):
        n1 = np.arange(max(0, N - n_max), min(N, n_max) + 1)
        out.append(n1 * (n_max + 1) + (N - n1))
    return out


def fock_state(basis: FockBasis, n1: int, n2: int) -> FockVector:
    amps = np.zeros(basis.dim, dtype=complex)
    amps[basis.index(n1, n2)] = 1.0
    return FockVector(basis, amps)


def mode_coefficients(phi: float, theta: float) -> tuple[complex, complex]:
    """Normalized single-particle mode ``(c1, c2)`` with ``c2`` real and >= 0."""
    return math.sin(theta / 2) * complex(math.cos(phi), math.sin(phi)), math.cos(theta / 2)


def mode_angles(c1: complex, c2: complex) -> tuple[float, float]:
    """Inverse of :func:`mode_coefficients` (normalizes first)."""
    nrm = math.sqrt(abs(c1) ** 2 + abs(c2) ** 2)
    c1, c2 = c1 / nrm, c2 / nrm
    theta = math.acos(min(1.0, max(-1.0, 1 - 2 * abs(c1) ** 2)))
    phi = float(np.angle(c1 * np.conj(c2)))
    return phi, theta


def product_state(phi: float, theta: float, N0: int, basis: FockBasis) -> FockVector:
    """All ``N0`` particles in the mode ``(c1, c2)`` fixed by the Bloch angles.

    At the poles (``theta`` = 0 or pi) ``phi`` has no effect.
    """
    if basis.n_max < N0:
        raise TruncationError(f"n_max={basis.n_max} cannot hold N0={N0} particles")
    if not -1e-12 <= theta <= math.pi + 1e-12:
        raise ValueError(f"theta must lie in [0, pi], got {theta}")
    c1, c2 = mode_coefficients(phi, theta)
    m = np.arange(N0 + 1)
    # sqrt(binom(N0, m)) c1^(N0-m) c2^m, in logs so large N0 does not overflow
    logb = 0.5 * (gammaln(N0 + 1) - gammaln(m + 1) - gammaln(N0 - m + 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        la1, la2 = np.log(abs(c1)), np.log(abs(c2))
        mag = np.exp(logb + np.where(N0 - m > 0, (N0 - m) * la1, 0.0)
                     + np.where(m > 0, m * la2, 0.0))
    phase = np.exp(1j * (N0 - m) * np.angle(c1)) if abs(c1) > 0 else 1.0
    amps = np.zeros(basis.dim, dtype=complex)
    amps[(N0 - m) * (basis.n_max + 1) + m] = mag * phase
    # exact zeros at the poles (0**0 handled above as 1)
    return FockVector(basis, amps)


def spdm_from_state(state: FockVector | DensityMatrix) -> np.ndarray:
    """Single-particle density matrix ``sigma[j, k] = <a_j^dag a_k>``."""
    ops = (state.basis.a1, state.basis.a2)
    sigma = np.empty((2, 2), dtype=complex)
    if isinstance(state, FockVector):
        v = [op @ state.amplitudes for op in ops]
        for j in range(2):
            for k in range(2):
                sigma[j, k] = np.vdot(v[j], v[k])
    else:
        rho = state.entries
        for j in range(2):
            for k in range(2):
                sigma[j, k] = _expect_dm(ops[j].getH() @ ops[k], rho)
    # enforce exact Hermiticity of the computed pair
    sigma[1, 0] = np.conj(sigma[0, 1])
    sigma[0, 0] = sigma[0, 0].real
    sigma[1, 1] = sigma[1, 1].real
    return sigma


def _expect_dm(op: sp.spmatrix, rho: np.ndarray) -> complex:
    # tr(op @ rho) without forming the product
    return complex(op.multiply(rho.T).sum())


# pair order of the ten Bloch covariances
COV_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3), (3, 3))
COV_NAMES = ("xx", "yy", "zz", "xy", "xz", "yz", "xn", "yn", "zn", "nn")


def bloch_expectations(state: FockVector | DensityMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(<A_j>, <A_j A_k + A_k A_j>)`` over ``A = (L_x, L_y, L_z, n)``."""
    ops = state.basis.bloch_operators
    mean = np.empty(4)
    sym = np.empty((4, 4))
    if isinstance(state, FockVector):
        psi = state.amplitudes
        v = [op @ psi for op in ops]
        for j in range(4):
            mean[j] = np.vdot(psi, v[j]).real
            for k in range(j, 4):
                sym[j, k] = sym[k, j] = 2.0 * np.vdot(v[j], v[k]).real
    else:
        rho = state.entries
        prods = [op @ rho for op in ops]
        for j in range(4):
            mean[j] = prods[j].diagonal().sum().real
            for k in range(j, 4):
                # tr(A_j A_k rho) + tr(A_k A_j rho) = 2 Re tr(A_j A_k rho) for Hermitian rho
                sym[j, k] = sym[k, j] = 2.0 * _expect_dm(ops[j], prods[k]).real
    return mean, sym


def moments_from_state(state: FockVector | DensityMatrix) -> np.ndarray:
    """Fourteen Bloch-form moments ``(s_x, s_y, s_z, n, Delta_xx, ..., Delta_nn)``.

    ``s_j = 2 <L_j>`` and ``Delta_jk = <A_j A_k + A_k A_j> - 2 <A_j><A_k>``.
    """
    mean, sym = bloch_expectations(state)
    out = np.empty(14)
    out[:3] = 2 * mean[:3]
    out[3] = mean[3]
    for i, (j, k) in enumerate(COV_PAIRS):
        out[4 + i] = sym[j, k] - 2 * mean[j] * mean[k]
    return out


def covariances_from_state(state: FockVector | DensityMatrix) -> np.ndarray:
    """The ten Bloch covariances in ``COV_NAMES`` order."""
    return moments_from_state(state)[4:]


def product_state_moments(phi: float, theta: float, N0: float) -> np.ndarray:
    """Closed-form fourteen moments of an ``N0``-particle product state.

    With unit Bloch vector ``u`` the covariances are
    ``Delta_ab = N0 (delta_ab - u_a u_b) / 2`` among ``L_x, L_y, L_z`` and vanish
    whenever ``n`` is involved.
    """
    u = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
    out = np.zeros(14)
    out[:3] = N0 * u
    out[3] = N0
    for i, (j, k) in enumerate(COV_PAIRS[:6]):
        out[4 + i] = 0.5 * N0 * ((j == k) - u[j] * u[k])
    return out


TRUNCATION_POLICIES = ("abort", "warn")


def check_truncation(top_probability: float, where: str = "", policy: str = "abort",
                     warn: bool = True) -> None:
    """Warn or abort depending on the probability in the top occupation shell.

    ``policy="warn"`` downgrades the abort to a warning; only diagnostics that
    deliberately study a truncated generator should use it. ``warn=False``
    leaves the warning to the caller (long series warn once at the end).
    """
    if policy not in TRUNCATION_POLICIES:
        raise ValueError(f"unknown truncation policy {policy!r}")
    if top_probability > TRUNCATION_ABORT and policy == "abort":
        raise TruncationError(f"top-shell probability {top_probability:.3g} exceeds "
                              f"{TRUNCATION_ABORT:g}{' ' + where if where else ''}; raise n_max")
    if warn and top_probability > TRUNCATION_WARN:
        warnings.warn(f"top-shell probability {top_probability:.3g}{' ' + where if where else ''}",
                      TruncationWarning, stacklevel=3)
