"""Observables, SPDM eigenvalues, purity revivals and revival maps."""

from __future__ import annotations

import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize

from . import bbr, ode
from .core import SystemParams, product_state_moments

log = logging.getLogger(__name__)

ZERO_REVIVAL = 1e-3
# particle-number growth (in units of N0) that marks a revival run as diverging
GROWTH_BOUND = 10.0
SAMPLES_PER_PERIOD = 40
WORKERS_ENV = "PTBEC_WORKERS"


class UndefinedObservableError(ValueError):
    pass


class NoStableOptimumError(RuntimeError):
    pass


# ------------------------------------------------------------------ observables

@dataclass(frozen=True)
class Observables:
    P: float
    nu: float
    I: float


def observables(s) -> Observables:
    """Purity, contrast and imbalance of ``(s_x, s_y, s_z, n)``."""
    sx, sy, sz, n = (float(v) for v in np.asarray(getattr(s, "as_array", lambda: s)())[:4])
    if not n > 0:
        raise UndefinedObservableError(f"observables need n > 0, got n = {n}")
    nu2 = (sx * sx + sy * sy) / (n * n)
    imb = sz * sz / (n * n)
    return Observables(P=nu2 + imb, nu=math.sqrt(nu2), I=imb)


def observables_series(moments) -> dict[str, np.ndarray]:
    """Vectorized :func:`observables` over the leading axis of ``moments``."""
    m = np.asarray(moments, dtype=float)
    n = m[..., 3]
    if np.any(~(n > 0) & np.isfinite(n)):
        raise UndefinedObservableError("observables need n > 0")
    nu2 = (m[..., 0] ** 2 + m[..., 1] ** 2) / n ** 2
    imb = m[..., 2] ** 2 / n ** 2
    return {"P": nu2 + imb, "nu": np.sqrt(nu2), "I": imb}


def spdm_from_moments(s) -> np.ndarray:
    """Reduced single-particle density matrix ``sigma / n`` from Bloch moments."""
    sx, sy, sz, n = np.asarray(s, dtype=float)[:4]
    if not n > 0:
        raise UndefinedObservableError(f"SPDM needs n > 0, got n = {n}")
    s12 = 0.5 * (sx - 1j * sy)
    return np.array([[0.5 * (n - sz), s12], [np.conj(s12), 0.5 * (n + sz)]]) / n


@dataclass(frozen=True)
class SPDMEigen:
    lambda1: float
    lambda2: float
    mode: tuple[complex, complex] | None

    @property
    def defined(self) -> bool:
        return self.mode is not None

    @property
    def mode_summary(self) -> tuple[float, float, float]:
        """``(|c1|, |c2|, arg(c1 c2*))``; NaN when the mode is undefined."""
        if self.mode is None:
            return (math.nan, math.nan, math.nan)
        c1, c2 = self.mode
        return abs(c1), abs(c2), float(np.angle(c1 * np.conj(c2)))


def spdm_eigen(sigma_red, degenerate_tol: float = 1e-12) -> SPDMEigen:
    """Eigenvalues ``lambda1 >= lambda2`` and the condensed mode.

    The mode is the leading eigenvector of the transposed matrix, so that a
    product state in mode ``(c1, c2)`` returns ``(c1, c2)``; the phase is
    fixed by making ``c2`` real and nonnegative.
    """
    sig = np.asarray(sigma_red, dtype=complex)
    if sig.shape != (2, 2):
        raise ValueError("sigma_red must be 2x2")
    if abs(sig[0, 1] - np.conj(sig[1, 0])) > 1e-10 or abs(np.trace(sig) - 1) > 1e-10:
        raise ValueError("sigma_red must be Hermitian with unit trace")
    a, d = sig[0, 0].real, sig[1, 1].real
    b = sig[0, 1]
    # closed form keeps lambda = (1 +- sqrt(P)) / 2 to rounding
    r = math.sqrt(max(0.0, (a - d) ** 2 + 4 * abs(b) ** 2))
    lam1, lam2 = 0.5 * (1 + r), 0.5 * (1 - r)
    if r <= degenerate_tol:
        return SPDMEigen(lam1, lam2, None)
    w, v = np.linalg.eigh(sig.T)
    c = v[:, int(np.argmax(w))]
    if abs(c[1]) > 0:
        c = c * np.exp(-1j * np.angle(c[1]))
    else:
        c = c * np.exp(-1j * np.angle(c[0]))
    return SPDMEigen(lam1, lam2, (complex(c[0]), complex(c[1].real)))


# -------------------------------------------------------------------- revivals

@dataclass
class RevivalReport:
    minima: list[tuple[float, float]]
    maxima: list[tuple[float, float]]
    strengths: list[float]
    reliability_index: int
    strongest: float
    t_strongest: float
    stable: bool
    pairs: list[tuple[tuple[float, float], tuple[float, float]]] = field(default_factory=list)

    @classmethod
    def empty(cls, stable: bool = True) -> "RevivalReport":
        return cls([], [], [], -1, 0.0, math.nan, stable)


def _quadratic_vertex(t, y):
    # vertex of the parabola through three points
    (t0, t1, t2), (y0, y1, y2) = t, y
    d0, d1 = (y1 - y0) / (t1 - t0), (y2 - y1) / (t2 - t1)
    a = (d1 - d0) / (t2 - t0)
    if a == 0:
        return t1, y1
    b = d0 - a * (t0 + t1)
    tv = -b / (2 * a)
    if not t0 <= tv <= t2:
        return t1, y1
    return tv, y0 + (tv - t0) * (d0 + a * (tv - t1))


def _extrema(t, P):
    """Interior extrema as ``(index, kind)`` with kind +1 (max) or -1 (min), alternating."""
    sgn = np.sign(np.diff(P))
    nz = np.flatnonzero(sgn)
    if nz.size < 2:
        return []
    # exact plateaus inherit the sign before them
    idx = np.maximum.accumulate(np.where(sgn != 0, np.arange(sgn.size), -1))
    filled = np.where(idx >= 0, sgn[np.maximum(idx, 0)], 0)
    change = np.flatnonzero(filled[1:] * filled[:-1] < 0) + 1
    return [(int(i), 1 if filled[i - 1] > 0 else -1) for i in change]


def revival_analysis(t, P, stable: bool = True, refiner=None,
                     diverged: bool = False) -> RevivalReport:
    """Locate purity extrema and the strongest revival within the reliability window.

    ``strengths[i]`` is the rise from the ``i``-th minimum to the maximum that
    follows it. The window extends up to the last revival before the first
    strict decrease of the strengths (ties continue it). Strengths below
    ``ZERO_REVIVAL`` are reported as zero. ``refiner(i, kind)`` may replace the
    three-point quadratic refinement around sample ``i``.

    ``diverged`` marks a series cut short by a particle-number divergence
    (non-finite tail). It is unstable only if the divergence comes before the
    window closes, i.e. before a strict decrease of the strengths is seen;
    later divergence lies beyond the range where the series is trusted.
    ``stable=False`` forces an unstable report.
    """
    t = np.asarray(t, dtype=float)
    P = np.asarray(P, dtype=float)
    if t.shape != P.shape:
        raise ValueError("t and P must have the same shape")
    if not stable:
        return RevivalReport.empty(stable=False)
    keep = np.isfinite(P)
    if not np.all(keep):
        # truncate at the first non-finite sample
        stop = int(np.argmin(keep))
        t, P = t[:stop], P[:stop]
    if t.size < 3:
        return RevivalReport.empty(not diverged)
    minima, maxima, pairs = [], [], []
    last_min = None
    for i, kind in _extrema(t, P):
        if refiner is not None:
            te, pe = refiner(i, kind)
        else:
            te, pe = _quadratic_vertex(t[i - 1:i + 2], P[i - 1:i + 2])
        if kind < 0:
            minima.append((te, pe))
            last_min = (te, pe)
        else:
            maxima.append((te, pe))
            if last_min is not None:
                pairs.append((last_min, (te, pe)))
                last_min = None
    strengths = [mx[1] - mn[1] for mn, mx in pairs]
    if not strengths:
        if diverged:
            return RevivalReport.empty(stable=False)
        return RevivalReport(minima, maxima, [], -1, 0.0, math.nan, stable, [])
    r = 0
    while r + 1 < len(strengths) and strengths[r + 1] >= strengths[r]:
        r += 1
    if diverged and r + 1 == len(strengths):
        return RevivalReport.empty(stable=False)
    best = max(range(r + 1), key=lambda i: strengths[i])
    dp = strengths[best]
    t_best = pairs[best][1][0]
    if dp < ZERO_REVIVAL:
        dp, t_best = 0.0, math.nan
    return RevivalReport(minima, maxima, strengths, r, dp, t_best, stable, pairs)


def sample_step(params: SystemParams, samples_per_period: int = SAMPLES_PER_PERIOD) -> float:
    """Time step resolving the purity oscillations with the given density."""
    # the oscillation frequency is about 2J for weak gain/loss and grows with g
    f = 2 * params.J + abs(params.g) + params.gamma_plus
    return 2 * math.pi / (samples_per_period * max(f, 1e-12))


def default_t_max(params: SystemParams) -> float:
    """Observation window long enough to pass the strongest revival.

    Without interaction the envelope time scale grows linearly with ``N0``;
    the interaction compresses it.
    """
    return 100.0 + 3.0 * params.N0 / (1.0 + abs(params.g) * math.sqrt(params.N0))


def _dP_dt(y, args):
    out = np.empty(14)
    bbr.bloch_rhs(0.0, y, args, out)
    s, n = y[:3], y[3]
    return 2 * np.dot(s, out[:3]) / n ** 2 - 2 * np.dot(s, s) * out[3] / n ** 3


def exact_refiner(series: bbr.BBRSeries, params: SystemParams):
    """Refiner that locates extrema as roots of dP/dt by re-integrating from samples.

    Produces revival strengths that vary smoothly with the initial state, as
    needed for finite-difference optimality checks.
    """
    args = bbr._bloch_args(params, series.mode == "neglect")
    t = series.t
    Y = np.where(np.isnan(series.moments), 0.0, series.moments)
    atol = bbr.ATOL_PER_PARTICLE * params.N0

    def state_at(k, tau):
        if tau == t[k]:
            return Y[k]
        out, status, _, _ = ode.dopri5(bbr.bloch_rhs, bbr._particle_guard, Y[k].copy(),
                                       np.array([t[k], tau]), args, bbr.RTOL, atol, np.inf,
                                       bbr.MAX_STEPS)
        return out[-1]

    def refine(i, kind):
        lo, hi = i - 1, i + 1
        f = lambda tau: _dP_dt(state_at(lo, tau), args)
        try:
            fa, fb = f(t[lo]), f(t[hi])
            if fa * fb > 0:
                # extremum too close to a sample: split the bracket at the sample
                tm = t[i]
                fm = f(tm)
                if fa * fm <= 0:
                    te = brentq(f, t[lo], tm, xtol=1e-13, rtol=1e-13)
                elif fm * fb <= 0:
                    te = brentq(f, tm, t[hi], xtol=1e-13, rtol=1e-13)
                else:
                    return _quadratic_vertex(t[lo:hi + 1], series.purity[lo:hi + 1])
            else:
                te = brentq(f, t[lo], t[hi], xtol=1e-13, rtol=1e-13)
        except (ValueError, ZeroDivisionError):
            return _quadratic_vertex(t[lo:hi + 1], series.purity[lo:hi + 1])
        y = state_at(lo, te)
        return te, float(np.dot(y[:3], y[:3]) / y[3] ** 2)

    return refine


def strongest_revival(params: SystemParams, phi: float, theta: float, *,
                      t_max: float | None = None, dt: float | None = None,
                      mode: str = "full", exact: bool = False,
                      growth_bound: float = GROWTH_BOUND) -> RevivalReport:
    """Integrate the moment equations from the product state ``(phi, theta)`` and analyze P(t).

    The run is cut once the particle number exceeds ``growth_bound * N0``; if
    that happens before the reliability window closes the state is unstable.
    """
    t_max = default_t_max(params) if t_max is None else t_max
    dt = sample_step(params) if dt is None else dt
    n = int(math.ceil(t_max / dt))
    t = np.linspace(0.0, n * dt, n + 1)
    y0 = product_state_moments(phi, theta, params.N0)
    series = bbr.integrate_bbr(y0, t, params, mode, divergence_factor=growth_bound)
    refiner = exact_refiner(series, params) if exact else None
    return revival_analysis(t, series.purity, refiner=refiner, diverged=not series.stable)


# ------------------------------------------------------------------ revival map

@dataclass
class RevivalMap:
    """``delta_p[i, j]`` belongs to ``theta_grid[i]`` and ``phi_grid[j]``."""

    phi_grid: np.ndarray
    theta_grid: np.ndarray
    delta_p: np.ndarray
    stability: np.ndarray
    t_strongest: np.ndarray
    params: SystemParams
    t_max: float
    metadata: dict = field(default_factory=dict)

    @property
    def stable_fraction(self) -> float:
        return float(np.mean(self.stability))

    def argmax(self) -> tuple[int, int]:
        """Cell of the largest stable ``delta_p``; ties go to the lowest ``(phi, theta)``."""
        dp = np.where(self.stability, self.delta_p, -np.inf)
        best = dp.max()
        cand = [(self.phi_grid[j], self.theta_grid[i], i, j)
                for i, j in zip(*np.nonzero(dp == best))]
        _, _, i, j = min(cand)
        return int(i), int(j)

    def nearest_cell(self, phi: float, theta: float) -> tuple[int, int]:
        dphi = np.angle(np.exp(1j * (self.phi_grid - phi)))
        return int(np.argmin(np.abs(self.theta_grid - theta))), int(np.argmin(np.abs(dphi)))

    def top_cells(self, k: int) -> list[tuple[int, int]]:
        """Up to ``k`` stable cells, local maxima first (``phi`` periodic), by decreasing ``delta_p``."""
        dp = np.where(self.stability, self.delta_p, -np.inf)
        padded = np.pad(dp, ((1, 1), (0, 0)), constant_values=-np.inf)
        peak = np.ones(dp.shape, dtype=bool)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di or dj:
                    nb = np.roll(padded, (-di, -dj), axis=(0, 1))[1:-1]
                    peak &= dp >= nb
        order = np.argsort(-dp, axis=None, kind="stable")
        ranked = [f for f in order if np.isfinite(dp.flat[f]) and dp.flat[f] > 0]
        ranked = [f for f in ranked if peak.flat[f]] + [f for f in ranked if not peak.flat[f]]
        return [tuple(int(v) for v in np.unravel_index(f, dp.shape)) for f in ranked[:k]]


def angle_grids(n_phi: int, n_theta: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred grids, ``phi`` in ``[0, 2 pi)`` and ``theta`` in ``(0, pi)``."""
    phi = (np.arange(n_phi) + 0.5) * 2 * math.pi / n_phi
    theta = (np.arange(n_theta) + 0.5) * math.pi / n_theta
    return phi, theta


def _cell(args):
    params, phi, theta, t_max, dt, i, j = args
    try:
        rep = strongest_revival(params, phi, theta, t_max=t_max, dt=dt)
        return i, j, rep.strongest, rep.stable, rep.t_strongest
    except ode.IntegrationError:
        return i, j, 0.0, False, math.nan


def _checkpoint_header(params, phi, theta, t_max, dt):
    return {"params": params.as_dict(), "n_phi": len(phi), "n_theta": len(theta),
            "t_max": t_max, "dt": dt}


def _read_checkpoint(path: Path, header: dict) -> dict:
    done = {}
    if not path.exists():
        return done
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        return done
    if json.loads(lines[0]) != json.loads(json.dumps(header)):
        raise ValueError(f"checkpoint {path} belongs to a different map")
    for line in lines[1:]:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break  # a torn final line from an interrupted write
        done[(rec["i"], rec["j"])] = (rec["dp"], rec["stable"],
                                      math.nan if rec["t"] is None else rec["t"])
    return done


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def revival_map(params: SystemParams, n_phi: int = 100, n_theta: int = 100, *,
                t_max: float | None = None, dt: float | None = None,
                checkpoint: str | os.PathLike | None = None, workers: int | None = None,
                progress: bool = False) -> RevivalMap:
    """Strongest revival for every cell of an ``n_theta x n_phi`` grid of product states.

    Diverging cells are marked unstable and get ``delta_p = 0``. With
    ``checkpoint`` every finished cell is appended to a JSON-lines file and
    already finished cells are skipped on the next call.
    """
    t_max = default_t_max(params) if t_max is None else float(t_max)
    dt = sample_step(params) if dt is None else float(dt)
    phi, theta = angle_grids(n_phi, n_theta)
    header = _checkpoint_header(params, phi, theta, t_max, dt)
    done = {}
    fh = None
    if checkpoint is not None:
        path = Path(checkpoint)
        done = _read_checkpoint(path, header)
        fh = path.open("a")
        if path.stat().st_size == 0:
            fh.write(json.dumps(header) + "\n")
            fh.flush()
    todo = [(params, phi[j], theta[i], t_max, dt, i, j)
            for i in range(n_theta) for j in range(n_phi) if (i, j) not in done]
    workers = default_workers() if workers is None else max(1, int(workers))
    start = time.perf_counter()
    results = dict(done)

    def collect(rec, k):
        i, j, dp, st, ts = rec
        results[(i, j)] = (dp, st, ts)
        if fh is not None:
            fh.write(json.dumps({"i": i, "j": j, "dp": dp, "stable": st,
                                 "t": None if math.isnan(ts) else ts}) + "\n")
            fh.flush()
        if progress and (k + 1) % max(1, len(todo) // 20) == 0:
            print(f"revival-map: {len(results)}/{n_phi * n_theta} cells "
                  f"({time.perf_counter() - start:.0f}s)", file=sys.stderr, flush=True)

    try:
        if workers == 1 or len(todo) < 2:
            for k, a in enumerate(todo):
                collect(_cell(a), k)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for k, rec in enumerate(pool.map(_cell, todo, chunksize=16)):
                    collect(rec, k)
    finally:
        if fh is not None:
            fh.close()
    dp = np.zeros((n_theta, n_phi))
    st = np.zeros((n_theta, n_phi), dtype=bool)
    ts = np.full((n_theta, n_phi), np.nan)
    for (i, j), (d, s, tt) in results.items():
        dp[i, j], st[i, j], ts[i, j] = d, s, tt
    return RevivalMap(phi, theta, dp, st, ts, params, t_max,
                      metadata={"dt": dt, "wall_time": time.perf_counter() - start,
                                "workers": workers})


# ---------------------------------------------------------------- maximization

@dataclass
class RevivalOptimum:
    phi: float
    theta: float
    delta_p_max: float
    t_star: float
    gradient_norm: float
    n_evaluations: int
    starts: list[dict] = field(default_factory=list)


def _wrap(phi, theta):
    # fold theta into [0, pi] by continuing over the poles
    theta = math.fmod(theta, 2 * math.pi)
    if theta < 0:
        theta += 2 * math.pi
    if theta > math.pi:
        theta = 2 * math.pi - theta
        phi += math.pi
    return math.fmod(phi, 2 * math.pi) % (2 * math.pi), theta


def maximize_revival(params: SystemParams, multistart: int = 6, *,
                     coarse: RevivalMap | None = None, coarse_shape: tuple[int, int] = (24, 24),
                     t_max: float | None = None, grad_step: float = 1e-3,
                     xatol: float = 1e-7, fatol: float = 1e-11) -> RevivalOptimum:
    """Maximize the strongest revival over product-state angles.

    Nelder-Mead on ``-delta_p`` from the ``multistart`` best stable cells of a
    coarse map. Extrema are refined exactly so ``delta_p`` is smooth enough for
    the central-difference gradient reported with the result. Unstable states
    count as ``delta_p = 0``; if no start is stable, :class:`NoStableOptimumError`.
    """
    t_max = default_t_max(params) if t_max is None else float(t_max)
    if coarse is None:
        coarse = revival_map(params, coarse_shape[1], coarse_shape[0], t_max=t_max)
    starts = coarse.top_cells(multistart)
    if not starts:
        raise NoStableOptimumError("no stable cell in the coarse map")
    n_eval = 0
    cache: dict[tuple[float, float], RevivalReport] = {}

    def report(x):
        nonlocal n_eval
        phi, theta = _wrap(float(x[0]), float(x[1]))
        key = (phi, theta)
        if key not in cache:
            n_eval += 1
            try:
                cache[key] = strongest_revival(params, phi, theta, t_max=t_max, exact=True)
            except ode.IntegrationError:
                cache[key] = RevivalReport.empty(stable=False)
        return cache[key]

    def objective(x):
        r = report(x)
        return -r.strongest if r.stable else 0.0

    runs = []
    for i, j in starts:
        x0 = np.array([coarse.phi_grid[j], coarse.theta_grid[i]])
        h = 0.5 * (coarse.phi_grid[1] - coarse.phi_grid[0]) if coarse.phi_grid.size > 1 else 0.1
        simplex = np.array([x0, x0 + [h, 0.0], x0 + [0.0, h]])
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"xatol": xatol, "fatol": fatol, "initial_simplex": simplex,
                                "maxiter": 2000})
        rep = report(res.x)
        runs.append({"start": (float(x0[0]), float(x0[1])), "x": _wrap(*res.x),
                     "delta_p": rep.strongest if rep.stable else 0.0, "stable": rep.stable,
                     "t": rep.t_strongest, "nit": int(res.nit)})
    stable_runs = [r for r in runs if r["stable"] and r["delta_p"] > 0]
    if not stable_runs:
        raise NoStableOptimumError("all multistart runs ended in unstable or revival-free states")
    best = min(stable_runs, key=lambda r: (-r["delta_p"], r["x"]))
    phi, theta = best["x"]
    g = np.empty(2)
    for k in range(2):
        e = np.zeros(2)
        e[k] = grad_step
        x = np.array([phi, theta])
        g[k] = (objective(x + e) - objective(x - e)) / (2 * grad_step)
    return RevivalOptimum(phi=phi, theta=theta, delta_p_max=best["delta_p"], t_star=best["t"],
                          gradient_norm=float(np.linalg.norm(g)), n_evaluations=n_eval,
                          starts=runs)


__all__ = [
    "Observables", "observables", "observables_series", "spdm_from_moments", "SPDMEigen",
    "spdm_eigen", "RevivalReport", "revival_analysis", "strongest_revival", "exact_refiner",
    "sample_step", "default_t_max", "RevivalMap", "angle_grids", "revival_map",
    "RevivalOptimum", "maximize_revival", "UndefinedObservableError", "NoStableOptimumError",
    "ZERO_REVIVAL", "GROWTH_BOUND", "default_workers",
]

