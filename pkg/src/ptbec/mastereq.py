"""Exact many-particle dynamics of the gain-loss dimer.

``evolve_dense`` integrates the Lindblad master equation for the full density
matrix and serves as small-N oracle. ``run_trajectories`` unravels the same
equation into quantum-jump trajectories.

Trajectory states are stored on the occupied total-number sectors only. The
effective Hamiltonian conserves ``N = n1 + n2`` and each jump shifts every
sector by one, so a state spanning sectors ``N_base .. N_base + K - 1`` keeps
that width forever; a product state has ``K = 1``. Each sector is
tridiagonal in ``n1``, which makes a trajectory step O(N) instead of O(N^2).
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit
import scipy.sparse as sp
from scipy.integrate import RK45

from . import ode
from .core import (COV_PAIRS, DensityMatrix, FockBasis, FockVector, SystemParams,
                   TRUNCATION_ABORT, TRUNCATION_WARN, TruncationError, TruncationWarning,
                   check_truncation, moments_from_state, sector_indices)

log = logging.getLogger(__name__)

DEFAULT_N_TRAJ = 500
LONG_RUN_N_TRAJ = 3000


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class JumpChannel:
    """Quantum jump channel; ``L^dag L`` is ``n1`` for loss and ``n2 + 1`` for gain."""

    site: int
    kind: str
    rate: float

    def operator(self, basis: FockBasis):
        if self.kind == "loss":
            return basis.a1 if self.site == 1 else basis.a2
        return (basis.a2 if self.site == 2 else basis.a1).getH().tocsr()


def jump_channels(params: SystemParams) -> tuple[JumpChannel, JumpChannel]:
    return (JumpChannel(1, "loss", params.gamma_loss),
            JumpChannel(2, "gain", params.gamma_gain))


# ---------------------------------------------------------------- dense oracle

@dataclass
class _DenseOps:
    H_eff: object
    a1: object
    a2dag: object
    gamma_loss: float
    gamma_gain: float


def _dense_ops(basis: FockBasis, params: SystemParams) -> _DenseOps:
    a1, a2 = basis.a1, basis.a2
    n1 = (a1.getH() @ a1).tocsr()
    fill2 = (a2 @ a2.getH()).tocsr()
    H = basis.hamiltonian(params)
    H_eff = (H - 0.5j * (params.gamma_loss * n1 + params.gamma_gain * fill2)).tocsr()
    return _DenseOps(H_eff, a1, a2.getH().tocsr(), params.gamma_loss, params.gamma_gain)


def _apply(ops: _DenseOps, rho: np.ndarray) -> np.ndarray:
    X = ops.H_eff @ rho
    out = -1j * (X - X.conj().T)
    if ops.gamma_loss:
        # a1 rho a1^dag = a1 (a1 rho^dag)^dag
        out += ops.gamma_loss * (ops.a1 @ (ops.a1 @ rho.conj().T).conj().T)
    if ops.gamma_gain:
        out += ops.gamma_gain * (ops.a2dag @ (ops.a2dag @ rho.conj().T).conj().T)
    return out


def liouvillian_apply(rho: DensityMatrix, params: SystemParams,
                      monitor: bool = True) -> DensityMatrix:
    """Time derivative ``-i[H, rho] + L_loss rho + L_gain rho``."""
    if monitor:
        check_truncation(rho.top_shell_probability(), "in liouvillian_apply")
    return DensityMatrix(rho.basis, _apply(_dense_ops(rho.basis, params), rho.dense()))


def _block_diagonal(rho: DensityMatrix, sectors: list[np.ndarray]) -> bool:
    label = np.empty(rho.basis.dim, dtype=np.int64)
    for N, idx in enumerate(sectors):
        label[idx] = N
    if rho.is_sparse:
        m = rho.entries.tocoo()
        keep = m.data != 0
        rows, cols = m.row[keep], m.col[keep]
    else:
        rows, cols = np.nonzero(rho.entries)
    return bool(np.all(label[rows] == label[cols]))


@njit(cache=True)
def _sector_rhs(y, out, lo, size, off, n_max, Nc, J, U, gl, gg):
    # block N holds rho[(n1a, N - n1a), (n1b, N - n1b)] at off[N] + a * s + b, n1 = lo[N] + index.
    # Gain out of n2 = n_max or out of N = Nc is closed in both the jump and the
    # anticommutator term, which keeps the trace exact.
    for N in range(Nc + 1):
        s = size[N]
        o = off[N]
        l = lo[N]
        E = np.empty(s)
        G = np.empty(s)
        cup = np.zeros(s + 1)
        for a in range(s):
            n1 = l + a
            n2 = N - n1
            E[a] = 0.5 * U * (n1 * (n1 - 1) + n2 * (n2 - 1))
            G[a] = gl * n1
            if n2 < n_max and N < Nc:
                G[a] += gg * (n2 + 1)
            # <n1, n2| a1^dag a2 |n1 - 1, n2 + 1>
            if a > 0:
                cup[a] = math.sqrt(n1 * (n2 + 1.0))
        has_up = N + 1 <= Nc
        has_dn = N >= 1
        for a in range(s):
            n1a = l + a
            n2a = N - n1a
            for b in range(s):
                n1b = l + b
                n2b = N - n1b
                r = y[o + a * s + b]
                v = (-1j * (E[a] - E[b]) - 0.5 * (G[a] + G[b])) * r
                hv = 0j
                if a > 0:
                    hv += cup[a] * y[o + (a - 1) * s + b]
                if a + 1 < s:
                    hv += cup[a + 1] * y[o + (a + 1) * s + b]
                if b > 0:
                    hv -= cup[b] * y[o + a * s + b - 1]
                if b + 1 < s:
                    hv -= cup[b + 1] * y[o + a * s + b + 1]
                # -i [H_hop, rho] with H_hop = -J (a1^dag a2 + h.c.)
                v += 1j * J * hv
                if gl != 0.0 and has_up and n1a < n_max and n1b < n_max:
                    su = size[N + 1]
                    ap = n1a + 1 - lo[N + 1]
                    bp = n1b + 1 - lo[N + 1]
                    if 0 <= ap < su and 0 <= bp < su:
                        v += gl * math.sqrt((n1a + 1.0) * (n1b + 1.0)) * y[off[N + 1] + ap * su + bp]
                if gg != 0.0 and has_dn and n2a >= 1 and n2b >= 1:
                    sd = size[N - 1]
                    ap = n1a - lo[N - 1]
                    bp = n1b - lo[N - 1]
                    if 0 <= ap < sd and 0 <= bp < sd:
                        v += gg * math.sqrt(n2a * 1.0 * n2b) * y[off[N - 1] + ap * sd + bp]
                out[o + a * s + b] = v


class _SectorSystem:
    """Master equation restricted to number-block-diagonal density matrices.

    The commutator keeps each ``N`` block, loss feeds it from ``N + 1`` and
    gain from ``N - 1``, so ``rho = sum_N rho_N`` stays closed. An optional
    total-number cutoff ``Nc`` drops the sectors above it.
    """

    def __init__(self, basis: FockBasis, params: SystemParams, n_total_max: int | None):
        n_max = basis.n_max
        Nc = 2 * n_max if n_total_max is None else min(int(n_total_max), 2 * n_max)
        self.basis, self.params, self.Nc = basis, params, Nc
        self.sectors = sector_indices(n_max)[:Nc + 1]
        self.size = np.array([idx.size for idx in self.sectors], dtype=np.int64)
        self.lo = np.array([max(0, N - n_max) for N in range(Nc + 1)], dtype=np.int64)
        self.off = np.concatenate([[0], np.cumsum(self.size ** 2)]).astype(np.int64)
        self.n = int(self.off[-1])
        # boundary states: per-mode top shell plus the cutoff sector
        bnd = np.zeros(self.n, dtype=bool)
        for N, idx in enumerate(self.sectors):
            s = idx.size
            n1 = self.lo[N] + np.arange(s)
            edge = (n1 == n_max) | (N - n1 == n_max) | (N == Nc and Nc < 2 * n_max)
            d = self.off[N] + np.arange(s) * (s + 1)
            bnd[d[edge]] = True
        self.boundary = np.flatnonzero(bnd)
        self.diag = np.concatenate([self.off[N] + np.arange(s) * (s + 1)
                                    for N, s in enumerate(self.size)])
        ops = basis.bloch_operators
        self.ops = [[op[idx][:, idx].tocsr() for op in ops] for idx in self.sectors]

    def rhs(self, t, y):
        out = np.empty_like(y)
        p = self.params
        _sector_rhs(y, out, self.lo, self.size, self.off, self.basis.n_max, self.Nc,
                    p.J, p.U, p.gamma_loss, p.gamma_gain)
        return out

    def step_bound(self) -> float:
        """Gershgorin bound on the generator's spectral radius."""
        p = self.params
        worst = 0.0
        for N in range(self.Nc + 1):
            n1 = self.lo[N] + np.arange(self.size[N])
            n2 = N - n1
            E = 0.5 * p.U * (n1 * (n1 - 1) + n2 * (n2 - 1))
            worst = max(worst, np.ptp(E) + p.gamma_loss * (N + 1) + p.gamma_gain * (N + 2)
                        + 4 * abs(p.J) * (N + 1))
        return worst

    def blocks(self, y):
        return [y[self.off[N]:self.off[N + 1]].reshape(s, s) for N, s in enumerate(self.size)]

    def pack(self, rho: DensityMatrix) -> np.ndarray:
        m = rho.entries.tocsr() if rho.is_sparse else rho.entries
        if rho.trace - sum(float(np.real(m[idx, idx].sum())) for idx in self.sectors) > 1e-12:
            raise TruncationError("rho0 has weight above the total-number cutoff")
        parts = []
        for idx in self.sectors:
            b = m[idx][:, idx]
            parts.append((b.toarray() if sp.issparse(b) else b).ravel())
        return np.concatenate(parts).astype(complex)

    def unpack(self, y) -> DensityMatrix:
        rows, cols = [], []
        for idx in self.sectors:
            r, c = np.meshgrid(idx, idx, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
        d = self.basis.dim
        m = sp.csr_matrix((y, (np.concatenate(rows), np.concatenate(cols))), shape=(d, d))
        return DensityMatrix(self.basis, m)

    def moments(self, y) -> np.ndarray:
        mean = np.zeros(4)
        sym = np.zeros((4, 4))
        for ops, b in zip(self.ops, self.blocks(y)):
            W = [op @ b for op in ops]
            for j in range(4):
                mean[j] += np.trace(W[j]).real
                for k in range(j, 4):
                    sym[j, k] += 2.0 * ops[j].multiply(W[k].T).sum().real
        out = np.empty(14)
        out[:3] = 2 * mean[:3]
        out[3] = mean[3]
        for i, (j, k) in enumerate(COV_PAIRS):
            out[4 + i] = sym[min(j, k), max(j, k)] - 2 * mean[j] * mean[k]
        return out

    def trace(self, y) -> float:
        return float(y[self.diag].real.sum())

    def top(self, y) -> float:
        return float(y[self.boundary].real.sum())

    def min_eigenvalue(self, y) -> float:
        return min(float(np.linalg.eigvalsh(0.5 * (b + b.conj().T))[0]) for b in self.blocks(y))


class _FullSystem:
    def __init__(self, basis: FockBasis, params: SystemParams):
        if basis.dim > 2500:
            raise ValueError(f"full dense integration of dimension {basis.dim} is not supported")
        self.basis = basis
        self.ops = _dense_ops(basis, params)
        self.d = basis.dim
        self.n = self.d * self.d
        self.params = params

    def rhs(self, t, y):
        return _apply(self.ops, y.reshape(self.d, self.d)).ravel()

    def step_bound(self) -> float:
        H = self.ops.H_eff
        return 2 * float(abs(H).sum(axis=1).max()) + self.params.gamma_loss * self.basis.n_max \
            + self.params.gamma_gain * (self.basis.n_max + 1)

    def pack(self, rho: DensityMatrix) -> np.ndarray:
        return rho.dense().astype(complex).ravel()

    def unpack(self, y) -> DensityMatrix:
        return DensityMatrix(self.basis, y.reshape(self.d, self.d).copy())

    def moments(self, y) -> np.ndarray:
        return moments_from_state(self.unpack(y))

    def trace(self, y) -> float:
        return float(np.trace(y.reshape(self.d, self.d)).real)

    def top(self, y) -> float:
        return float(np.diagonal(y.reshape(self.d, self.d))[self.basis.top_shell].real.sum())

    def min_eigenvalue(self, y) -> float:
        m = y.reshape(self.d, self.d)
        return float(np.linalg.eigvalsh(0.5 * (m + m.conj().T))[0])


def _dense_system(rho0: DensityMatrix, params: SystemParams, blocks: bool | None,
                  n_total_max: int | None):
    basis = rho0.basis
    sectors = sector_indices(basis.n_max)
    diag_blocks = _block_diagonal(rho0, sectors)
    if blocks is None:
        blocks = diag_blocks
    if blocks and not diag_blocks:
        raise ValueError("rho0 has coherences between particle-number sectors")
    if n_total_max is not None and not blocks:
        raise ValueError("a total-number cutoff needs a number-block-diagonal rho0")
    return _SectorSystem(basis, params, n_total_max) if blocks else _FullSystem(basis, params)


def _dense_run(system, y0, t_grid, rtol, atol, visit):
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0):
        raise ValueError("t_grid must be non-decreasing")
    if t_grid.size == 0:
        return
    i = 0
    while i < t_grid.size and t_grid[i] <= t_grid[0]:
        visit(i, t_grid[i], y0)
        i += 1
    if i == t_grid.size:
        return
    # cap the step inside the explicit stability region; the embedded error
    # estimate alone lets fast, nearly undamped sector modes creep upward
    max_step = 2.5 / max(system.step_bound(), 1e-12)
    solver = RK45(system.rhs, t_grid[0], y0, t_grid[-1], rtol=rtol, atol=atol,
                  max_step=max_step)
    while i < t_grid.size:
        msg = solver.step()
        if solver.status == "failed":
            raise ode.IntegrationError(f"dense master equation failed: {msg}")
        if i < t_grid.size and t_grid[i] <= solver.t:
            interp = solver.dense_output()
            while i < t_grid.size and t_grid[i] <= solver.t:
                y = solver.y if t_grid[i] == solver.t else interp(t_grid[i])
                visit(i, t_grid[i], y)
                i += 1


def evolve_dense(rho0: DensityMatrix, t_grid, params: SystemParams, *,
                 rtol: float = 1e-10, atol: float = 1e-12, blocks: bool | None = None,
                 n_total_max: int | None = None,
                 truncation: str = "abort") -> list[DensityMatrix]:
    """Integrate the master equation and return ``rho(t)`` on ``t_grid``.

    Uses scipy's Dormand-Prince 5(4) (``RK45``), independent of the integrator
    behind the moment hierarchy. Every output is checked by the truncation
    monitor. When ``rho0`` has no coherence between different total particle
    numbers (every product state) the equation is solved block by block and
    sparse density matrices are returned; ``blocks=False`` forces the full
    product-basis path. ``n_total_max`` additionally truncates ``n1 + n2``.
    """
    check_truncation(rho0.top_shell_probability(), "at t=0", truncation)
    system = _dense_system(rho0, params, blocks, n_total_max)
    out = []

    worst = [0.0, 0.0]

    def visit(i, t, y):
        top = system.top(y)
        check_truncation(top, f"at t={t:g}", truncation, warn=False)
        if top > worst[0]:
            worst[:] = top, t
        out.append(system.unpack(y))

    _dense_run(system, system.pack(rho0), t_grid, rtol, atol, visit)
    check_truncation(worst[0], f"(largest, at t={worst[1]:g})", truncation)
    return out


@dataclass
class DenseSeries:
    time_grid: np.ndarray
    moments: np.ndarray
    trace: np.ndarray
    min_eigenvalue: np.ndarray
    top_shell: np.ndarray


def dense_moment_series(rho0: DensityMatrix, t_grid, params: SystemParams, *,
                        rtol: float = 1e-10, atol: float = 1e-12,
                        n_total_max: int | None = None, positivity: bool = True,
                        truncation: str = "abort") -> DenseSeries:
    """Like :func:`evolve_dense` but keeps only the moments and health checks."""
    check_truncation(rho0.top_shell_probability(), "at t=0", truncation)
    system = _dense_system(rho0, params, None, n_total_max)
    t_grid = np.asarray(t_grid, dtype=float)
    nt = t_grid.size
    res = DenseSeries(t_grid, np.empty((nt, 14)), np.empty(nt), np.full(nt, np.nan),
                      np.empty(nt))

    def visit(i, t, y):
        res.top_shell[i] = system.top(y)
        check_truncation(res.top_shell[i], f"at t={t:g}", truncation, warn=False)
        res.moments[i] = system.moments(y)
        res.trace[i] = system.trace(y)
        if positivity:
            res.min_eigenvalue[i] = system.min_eigenvalue(y)

    _dense_run(system, system.pack(rho0), t_grid, rtol, atol, visit)
    k = int(np.argmax(res.top_shell))
    check_truncation(res.top_shell[k], f"(largest, at t={t_grid[k]:g})", truncation)
    return res


def dense_moments(states: list[DensityMatrix]) -> np.ndarray:
    """Fourteen Bloch-form moments for each density matrix, shape ``(T, 14)``."""
    return np.array([moments_from_state(r) for r in states])


# ----------------------------------------------------------- jump trajectories

TRAJ_OK = 0
TRAJ_NEED_UNIFORMS = 1
TRAJ_ZERO_NORM = 2
TRAJ_TRUNCATION = 3
TRAJ_STEP_UNDERFLOW = 4


@njit(cache=True)
def _sector_coefficients(N_base, K, n_max, J, U, gl, gg, diag, hop, lo, hi):
    # diag: complex diagonal of -i H_eff; hop[k, n1]: -i * (-J) * sqrt(n1 (n2 + 1)),
    # coupling amplitude at (n1 - 1, n2 + 1) into (n1, n2)
    for k in range(K):
        N = N_base + k
        lo[k] = max(0, N - n_max)
        hi[k] = min(N, n_max)
        for n1 in range(n_max + 1):
            n2 = N - n1
            if n1 < lo[k] or n1 > hi[k]:
                diag[k, n1] = 0.0
                hop[k, n1] = 0.0
                continue
            e = 0.5 * U * (n1 * (n1 - 1) + n2 * (n2 - 1))
            # truncated a2 a2^dag vanishes on the top shell, as in the product basis
            w = 0.5 * (gl * n1 + (gg * (n2 + 1) if n2 < n_max else 0.0))
            diag[k, n1] = -1j * e - w
            if n1 - 1 >= lo[k]:
                hop[k, n1] = 1j * J * math.sqrt(n1 * (n2 + 1.0))
            else:
                hop[k, n1] = 0.0


@njit(cache=True)
def _heff_rhs(A, diag, hop, lo, hi, out):
    K = A.shape[0]
    for k in range(K):
        for n1 in range(A.shape[1]):
            out[k, n1] = 0.0
        for n1 in range(lo[k], hi[k] + 1):
            v = diag[k, n1] * A[k, n1]
            if n1 > lo[k]:
                v += hop[k, n1] * A[k, n1 - 1]
            if n1 < hi[k]:
                v += hop[k, n1 + 1] * A[k, n1 + 1]
            out[k, n1] = v


@njit(cache=True)
def _norm2(A):
    s = 0.0
    for v in A.ravel():
        s += v.real * v.real + v.imag * v.imag
    return s


@njit(cache=True)
def _dense_eval(y, ynew, k1, k3, k4, k5, k6, k7, h, th, out):
    th1 = 1.0 - th
    for k in range(y.shape[0]):
        for i in range(y.shape[1]):
            ydiff = ynew[k, i] - y[k, i]
            bspl = h * k1[k, i] - ydiff
            r4 = ydiff - h * k7[k, i] - bspl
            r5 = h * (ode.D1 * k1[k, i] + ode.D3 * k3[k, i] + ode.D4 * k4[k, i]
                      + ode.D5 * k5[k, i] + ode.D6 * k6[k, i] + ode.D7 * k7[k, i])
            out[k, i] = y[k, i] + th * (ydiff + th1 * (bspl + th * (r4 + th1 * r5)))


@njit(cache=True)
def _record(A, N_base, lo, hi, n_max, out):
    # out[0:4] = <L_x>, <L_y>, <L_z>, <n>; out[4:14] = <A_j A_k + A_k A_j> in pair order;
    # out[14] = top-shell probability. A is normalized in place of the caller's copy.
    K, W = A.shape
    nrm = _norm2(A)
    inv = 1.0 / math.sqrt(nrm)
    vx = np.zeros((K, W), dtype=np.complex128)
    vy = np.zeros((K, W), dtype=np.complex128)
    vz = np.zeros((K, W), dtype=np.complex128)
    vn = np.zeros((K, W), dtype=np.complex128)
    top = 0.0
    for k in range(K):
        N = N_base + k
        for n1 in range(lo[k], hi[k] + 1):
            n2 = N - n1
            a = A[k, n1] * inv
            # (a1^dag a2 psi)[n1] = sqrt(n1 (n2 + 1)) psi[n1 - 1]
            up = 0j
            if n1 > lo[k]:
                up = math.sqrt(n1 * (n2 + 1.0)) * A[k, n1 - 1] * inv
            # (a2^dag a1 psi)[n1] = sqrt((n1 + 1) n2) psi[n1 + 1]
            dn = 0j
            if n1 < hi[k]:
                dn = math.sqrt((n1 + 1.0) * n2) * A[k, n1 + 1] * inv
            vx[k, n1] = 0.5 * (up + dn)
            vy[k, n1] = 0.5j * (up - dn)
            vz[k, n1] = 0.5 * (n2 - n1) * a
            vn[k, n1] = N * a
            if n1 == n_max or n2 == n_max:
                top += a.real * a.real + a.imag * a.imag
    # psi itself, normalized
    vecs = (vx, vy, vz, vn)
    for j in range(4):
        s = 0.0
        v = vecs[j]
        for k in range(K):
            for n1 in range(lo[k], hi[k] + 1):
                a = A[k, n1] * inv
                s += (np.conj(a) * v[k, n1]).real
        out[j] = s
    idx = 4
    for p in range(10):
        j = _PAIR_J[p]
        l = _PAIR_K[p]
        s = 0.0
        vj = vecs[j]
        vl = vecs[l]
        for k in range(K):
            for n1 in range(lo[k], hi[k] + 1):
                s += (np.conj(vj[k, n1]) * vl[k, n1]).real
        out[idx] = 2.0 * s
        idx += 1
    out[14] = top


_PAIR_J = np.array([p[0] for p in COV_PAIRS])
_PAIR_K = np.array([p[1] for p in COV_PAIRS])


@njit(cache=True)
def _channel_weights(A, N_base, lo, hi, n_max, gl, gg):
    wl = 0.0
    wg = 0.0
    for k in range(A.shape[0]):
        N = N_base + k
        for n1 in range(lo[k], hi[k] + 1):
            p = A[k, n1].real ** 2 + A[k, n1].imag ** 2
            wl += gl * n1 * p
            if N - n1 < n_max:
                wg += gg * (N - n1 + 1) * p
    return wl, wg


@njit(cache=True)
def _run_one(A0, N_base0, n_max, J, U, gl, gg, t_grid, uniforms, rtol, atol, top_abort, out):
    """Single trajectory. Returns ``(status, n_loss, n_gain, n_uniforms_used)``."""
    K, W = A0.shape
    nt = t_grid.size
    A = A0.copy()
    N_base = N_base0
    diag = np.empty((K, W), dtype=np.complex128)
    hop = np.empty((K, W), dtype=np.complex128)
    lo = np.empty(K, dtype=np.int64)
    hi = np.empty(K, dtype=np.int64)
    _sector_coefficients(N_base, K, n_max, J, U, gl, gg, diag, hop, lo, hi)
    k1 = np.empty((K, W), dtype=np.complex128); k2 = np.empty_like(k1)
    k3 = np.empty_like(k1); k4 = np.empty_like(k1); k5 = np.empty_like(k1)
    k6 = np.empty_like(k1); k7 = np.empty_like(k1); yt = np.empty_like(k1)
    ynew = np.empty_like(k1); tmp = np.empty_like(k1)
    used = 0
    n_loss = 0
    n_gain = 0
    if used >= uniforms.size:
        return TRAJ_NEED_UNIFORMS, 0, 0, used
    r = 1.0 - uniforms[used]
    used += 1
    t = t_grid[0]
    t_end = t_grid[nt - 1]
    idx = 0
    while idx < nt and t_grid[idx] <= t:
        _record(A, N_base, lo, hi, n_max, out[idx])
        if out[idx, 14] > top_abort:
            return TRAJ_TRUNCATION, n_loss, n_gain, used
        idx += 1
    _heff_rhs(A, diag, hop, lo, hi, k1)
    # spectral radius estimate of H_eff for the first step
    scale = abs(J) * (N_base + K) + abs(U) * (N_base + K) ** 2 + (gl + gg) * (N_base + K + 1)
    h = min(0.1, 0.5 / max(scale, 1e-12))
    h_min = 1e-14 * max(1.0, t_end)
    while idx < nt:
        if h < h_min:
            return TRAJ_STEP_UNDERFLOW, n_loss, n_gain, used
        last = t + h >= t_end - h_min
        if last:
            h = t_end - t
        yt[:] = A + h * ode.A21 * k1
        _heff_rhs(yt, diag, hop, lo, hi, k2)
        yt[:] = A + h * (ode.A31 * k1 + ode.A32 * k2)
        _heff_rhs(yt, diag, hop, lo, hi, k3)
        yt[:] = A + h * (ode.A41 * k1 + ode.A42 * k2 + ode.A43 * k3)
        _heff_rhs(yt, diag, hop, lo, hi, k4)
        yt[:] = A + h * (ode.A51 * k1 + ode.A52 * k2 + ode.A53 * k3 + ode.A54 * k4)
        _heff_rhs(yt, diag, hop, lo, hi, k5)
        yt[:] = A + h * (ode.A61 * k1 + ode.A62 * k2 + ode.A63 * k3 + ode.A64 * k4
                         + ode.A65 * k5)
        _heff_rhs(yt, diag, hop, lo, hi, k6)
        ynew[:] = A + h * (ode.A71 * k1 + ode.A73 * k3 + ode.A74 * k4 + ode.A75 * k5
                           + ode.A76 * k6)
        _heff_rhs(ynew, diag, hop, lo, hi, k7)
        # error norm over complex entries
        s = 0.0
        cnt = 0
        for k in range(K):
            for i in range(lo[k], hi[k] + 1):
                e = h * (ode.E1 * k1[k, i] + ode.E3 * k3[k, i] + ode.E4 * k4[k, i]
                         + ode.E5 * k5[k, i] + ode.E6 * k6[k, i] + ode.E7 * k7[k, i])
                sc = atol + rtol * max(abs(A[k, i]), abs(ynew[k, i]))
                s += (abs(e) / sc) ** 2
                cnt += 1
        en = math.sqrt(s / max(cnt, 1))
        if not en <= 1.0:
            h *= max(0.2, 0.9 * en ** -0.2) if np.isfinite(en) else 0.1
            continue
        t_new = t_end if last else t + h
        nrm_new = _norm2(ynew)
        jump = nrm_new <= r
        th_jump = 1.0
        if jump:
            c_th = 1.0
            # Illinois regula falsi for |psi(th)|^2 = r on the continuous extension
            a_th = 0.0
            fa = _norm2(A) - r
            b_th = 1.0
            fb = nrm_new - r
            side = 0
            for _ in range(100):
                c_th = (a_th * fb - b_th * fa) / (fb - fa)
                _dense_eval(A, ynew, k1, k3, k4, k5, k6, k7, h, c_th, tmp)
                fc = _norm2(tmp) - r
                if abs(fc) <= 1e-13 * r or (b_th - a_th) < 1e-15:
                    break
                if fc > 0:
                    a_th = c_th
                    fa = fc
                    if side == -1:
                        fb *= 0.5
                    side = -1
                else:
                    b_th = c_th
                    fb = fc
                    if side == 1:
                        fa *= 0.5
                    side = 1
            th_jump = c_th
        t_stop = t + th_jump * h if jump else t_new
        while idx < nt and t_grid[idx] <= t_stop:
            th = (t_grid[idx] - t) / h
            _dense_eval(A, ynew, k1, k3, k4, k5, k6, k7, h, th, tmp)
            _record(tmp, N_base, lo, hi, n_max, out[idx])
            if out[idx, 14] > top_abort:
                return TRAJ_TRUNCATION, n_loss, n_gain, used
            idx += 1
        if not jump:
            A[:] = ynew
            k1[:] = k7
            t = t_new
            fac = 0.9 * en ** -0.2 if en > 0 else 10.0
            h *= min(10.0, max(0.2, fac))
            continue
        # jump at t_stop
        _dense_eval(A, ynew, k1, k3, k4, k5, k6, k7, h, th_jump, tmp)
        t = t_stop
        if used + 2 > uniforms.size:
            return TRAJ_NEED_UNIFORMS, n_loss, n_gain, used
        wl, wg = _channel_weights(tmp, N_base, lo, hi, n_max, gl, gg)
        if wl + wg <= 0.0:
            return TRAJ_ZERO_NORM, n_loss, n_gain, used
        u = uniforms[used]
        used += 1
        A[:] = 0.0
        if u * (wl + wg) < wl:
            # a1 |n1, n2> = sqrt(n1) |n1 - 1, n2>; sector N -> N - 1
            for k in range(K):
                for n1 in range(max(lo[k], 1), hi[k] + 1):
                    A[k, n1 - 1] = math.sqrt(n1) * tmp[k, n1]
            N_base -= 1
            n_loss += 1
        else:
            # a2^dag |n1, n2> = sqrt(n2 + 1) |n1, n2 + 1>; sector N -> N + 1
            for k in range(K):
                N = N_base + k
                for n1 in range(lo[k], hi[k] + 1):
                    n2 = N - n1
                    if n2 < n_max:
                        A[k, n1] = math.sqrt(n2 + 1.0) * tmp[k, n1]
            N_base += 1
            n_gain += 1
        nrm = _norm2(A)
        if not nrm > 0.0:
            return TRAJ_ZERO_NORM, n_loss, n_gain, used
        inv = 1.0 / math.sqrt(nrm)
        for k in range(K):
            for i in range(W):
                A[k, i] *= inv
        _sector_coefficients(N_base, K, n_max, J, U, gl, gg, diag, hop, lo, hi)
        _heff_rhs(A, diag, hop, lo, hi, k1)
        r = 1.0 - uniforms[used]
        used += 1
    return TRAJ_OK, n_loss, n_gain, used


def _to_band(psi: FockVector) -> tuple[np.ndarray, int]:
    n_max = psi.basis.n_max
    amp = psi.amplitudes.reshape(n_max + 1, n_max + 1)
    n1, n2 = np.nonzero(amp)
    if n1.size == 0:
        raise NumericalFailure("zero initial state")
    N = n1 + n2
    N_lo, N_hi = int(N.min()), int(N.max())
    A = np.zeros((N_hi - N_lo + 1, n_max + 1), dtype=complex)
    A[N - N_lo, n1] = amp[n1, n2]
    return A, N_lo


def trajectory_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Independent stream for trajectory ``index`` of master ``seed``."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


@dataclass
class TrajectorySamples:
    """Per-trajectory expectation values, ``raw[i, t]`` as recorded by the kernel."""

    raw: np.ndarray
    n_loss: np.ndarray
    n_gain: np.ndarray


def _sample_trajectories(psi0: FockVector, t_grid: np.ndarray, params: SystemParams,
                         indices, seed: int, rtol: float, atol: float,
                         truncation: str = "abort", n_total: int | None = None) -> TrajectorySamples:
    # a single trajectory may touch the top shell; the monitor applies to the
    # ensemble mean, which equals tr(P_top rho), after sampling. With ``n_total``
    # the partial sum over n_total is a lower bound on that mean and aborts early.
    top_abort = np.inf
    A0, N_base = _to_band(psi0.normalized())
    n_max = psi0.basis.n_max
    rate = (params.gamma_loss + params.gamma_gain) * (N_base + A0.shape[0] + 1)
    span = float(t_grid[-1] - t_grid[0])
    base = int(2 * (rate * span * 1.5 + 10 * math.sqrt(rate * span + 1) + 16))
    indices = list(indices)
    raw = np.empty((len(indices), t_grid.size, 15))
    n_loss = np.empty(len(indices), dtype=np.int64)
    n_gain = np.empty(len(indices), dtype=np.int64)
    top_sum = np.zeros(t_grid.size)
    for row, i in enumerate(indices):
        size = base
        while True:
            # the stream is regenerated from its seed, so growing the buffer only extends it
            u = np.random.default_rng(trajectory_seed(seed, i)).random(size)
            status, nl, ng, _ = _run_one(A0, N_base, n_max, params.J, params.U,
                                         params.gamma_loss, params.gamma_gain, t_grid, u,
                                         rtol, atol, top_abort, raw[row])
            if status != TRAJ_NEED_UNIFORMS:
                break
            size *= 2
        if status == TRAJ_TRUNCATION:
            raise TruncationError(f"trajectory {i}: top-shell probability exceeded "
                                  f"{TRUNCATION_ABORT:g}; raise n_max")
        if status == TRAJ_ZERO_NORM:
            raise NumericalFailure(f"trajectory {i}: zero-norm state")
        if status == TRAJ_STEP_UNDERFLOW:
            raise ode.IntegrationError(f"trajectory {i}: step size underflow")
        n_loss[row] = nl
        n_gain[row] = ng
        if truncation == "abort" and n_total:
            top_sum += raw[row, :, 14]
            k = int(np.argmax(top_sum))
            if top_sum[k] / n_total > TRUNCATION_ABORT:
                raise TruncationError(
                    f"top-shell probability >= {top_sum[k] / n_total:.3g} exceeds "
                    f"{TRUNCATION_ABORT:g} (ensemble mean over trajectories, at "
                    f"t={t_grid[k]:g}, after {row + 1} of {n_total}); raise n_max")
    return TrajectorySamples(raw, n_loss, n_gain)


@dataclass
class TrajectoryEnsembleResult:
    """Ensemble means and standard errors of the fourteen Bloch-form moments.

    ``means[t]`` and ``stderr[t]`` follow ``MOMENT_NAMES``; covariance errors
    come from the linearized (delta-method) estimator over trajectories.
    """

    time_grid: np.ndarray
    means: np.ndarray
    stderr: np.ndarray
    n_traj: int
    seed: int
    purity: np.ndarray
    purity_stderr: np.ndarray
    n_loss: np.ndarray
    n_gain: np.ndarray
    max_top_shell: float
    wall_time: float
    metadata: dict = field(default_factory=dict)


def _ensemble_statistics(raw: np.ndarray) -> tuple[np.ndarray, ...]:
    # raw: (n_traj, T, 15) of <L_j>, <n>, <{A_j, A_k}>
    n_traj = raw.shape[0]
    mean = raw.mean(axis=0)
    L = mean[:, :4]
    means = np.empty((raw.shape[1], 14))
    means[:, :3] = 2 * L[:, :3]
    means[:, 3] = L[:, 3]
    infl = np.empty(raw.shape[:2] + (14,))
    infl[..., :3] = 2 * raw[..., :3]
    infl[..., 3] = raw[..., 3]
    for p, (j, k) in enumerate(COV_PAIRS):
        means[:, 4 + p] = mean[:, 4 + p] - 2 * L[:, j] * L[:, k]
        # linearization of mean(X) - 2 mean(a) mean(b) around the sample means
        infl[..., 4 + p] = raw[..., 4 + p] - 2 * (L[:, j] * raw[..., k] + L[:, k] * raw[..., j])
    if n_traj > 1:
        stderr = infl.std(axis=0, ddof=1) / math.sqrt(n_traj)
    else:
        stderr = np.zeros_like(means)
    s, n = means[:, :3], means[:, 3]
    # P is undefined (nan) where the ensemble holds no particles
    with np.errstate(invalid="ignore", divide="ignore"):
        purity = np.sum(s ** 2, axis=1) / n ** 2
        # d P = 2 s . ds / n^2 - 2 |s|^2 dn / n^3
        grad_s = 2 * s / n[:, None] ** 2
        grad_n = -2 * np.sum(s ** 2, axis=1) / n ** 3
        p_infl = np.einsum("tj,itj->it", grad_s, infl[..., :3]) + grad_n * infl[..., 3]
        p_err = (p_infl.std(axis=0, ddof=1) / math.sqrt(n_traj) if n_traj > 1
                 else np.zeros_like(purity))
    return means, stderr, purity, p_err


def run_trajectories(psi0: FockVector, t_grid, params: SystemParams,
                     n_traj: int = DEFAULT_N_TRAJ, seed: int = 0, *,
                     rtol: float = 1e-9, atol: float = 1e-11, truncation: str = "abort",
                     samples: TrajectorySamples | None = None,
                     workers: int = 1) -> TrajectoryEnsembleResult:
    """Quantum-jump unravelling of the master equation.

    Between jumps each trajectory follows ``H_eff = H - (i/2)[gamma_loss n1 +
    gamma_gain (n2 + 1)]``. A jump fires when the squared norm falls to a
    pre-drawn uniform threshold; the crossing time is located on the
    integrator's continuous extension. The channel is picked with probability
    ``rate * <L^dag L>``. Trajectory ``i`` draws its random numbers from
    ``SeedSequence([seed, i])``, so results do not depend on execution order;
    ``workers > 1`` samples contiguous index chunks in separate processes and
    merges them in index order, giving bit-identical results.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if abs(psi0.norm2 - 1) > 1e-8:
        raise ValueError("psi0 must be normalized")
    t_grid = np.ascontiguousarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) < 0):
        raise ValueError("t_grid must be non-decreasing")
    check_truncation(psi0.top_shell_probability(), "in psi0", truncation)
    start = time.perf_counter()
    if samples is None and workers > 1 and n_traj > 1:
        chunks = [c for c in np.array_split(np.arange(n_traj), workers) if c.size]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sample_trajectories, psi0, t_grid, params, c.tolist(), seed,
                                   rtol, atol, truncation, n_traj) for c in chunks]
            samples = merge_samples([f.result() for f in futures])
    elif samples is None:
        samples = _sample_trajectories(psi0, t_grid, params, range(n_traj), seed, rtol, atol,
                                       truncation, n_traj)
    raw = samples.raw
    means, stderr, purity, p_err = _ensemble_statistics(raw[..., :14])
    top_t = raw[..., 14].mean(axis=0)
    k = int(np.argmax(top_t))
    top = float(top_t[k])
    check_truncation(top, f"(ensemble mean over trajectories, at t={t_grid[k]:g})", truncation,
                     warn=False)
    if top > TRUNCATION_WARN:
        warnings.warn(f"trajectory ensemble top-shell probability reached {top:.3g}",
                      TruncationWarning, stacklevel=2)
    wall = time.perf_counter() - start
    log.info("%d trajectories in %.2fs", n_traj, wall)
    return TrajectoryEnsembleResult(
        time_grid=t_grid, means=means, stderr=stderr, n_traj=n_traj, seed=int(seed),
        purity=purity, purity_stderr=p_err, n_loss=samples.n_loss, n_gain=samples.n_gain,
        max_top_shell=top, wall_time=wall,
        metadata={"params": params.as_dict(), "seed": int(seed), "n_traj": n_traj,
                  "n_max": psi0.basis.n_max, "rtol": rtol, "atol": atol})


def sample_trajectories(psi0: FockVector, t_grid, params: SystemParams, indices,
                        seed: int = 0, *, rtol: float = 1e-9, atol: float = 1e-11,
                        truncation: str = "abort") -> TrajectorySamples:
    """Raw per-trajectory records for a subset of trajectory indices.

    Concatenating the samples of disjoint index chunks in index order and
    passing them to :func:`run_trajectories` reproduces a single-process run
    bit for bit.
    """
    t_grid = np.ascontiguousarray(t_grid, dtype=float)
    return _sample_trajectories(psi0.normalized(), t_grid, params, indices, seed, rtol, atol,
                                truncation)


def merge_samples(parts: list[TrajectorySamples]) -> TrajectorySamples:
    return TrajectorySamples(np.concatenate([p.raw for p in parts]),
                             np.concatenate([p.n_loss for p in parts]),
                             np.concatenate([p.n_gain for p in parts]))


__all__ = [
    "JumpChannel", "jump_channels", "liouvillian_apply", "evolve_dense", "dense_moments",
    "dense_moment_series", "DenseSeries",
    "run_trajectories", "sample_trajectories", "merge_samples", "TrajectoryEnsembleResult",
    "TrajectorySamples", "trajectory_seed", "NumericalFailure",
]
