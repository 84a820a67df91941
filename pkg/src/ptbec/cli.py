"""Command-line entry point: ``ptbec simulate | compare | revival-map | maximize | report``."""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import analysis, analytic, bbr, mastereq, meanfield, ode
from .core import (COV_NAMES, FockBasis, ParameterError, SystemParams, TruncationError,
                   default_n_max, make_params, product_state, product_state_moments)
from .io import git_version, write_csv, write_json, write_matrix

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
SOLVERS = ("dense", "jump", "bbr", "bbr-neglect", "analytic", "gpe")
MOMENTS = ("sx", "sy", "sz", "n")
DENSE_MAX_DIM = 40_000


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    J: float = 1.0
    g: float = 0.0
    N0: int = 100
    gamma: float = 0.0
    balanced: bool = True
    gamma_gain: float | None = None
    phi: float = math.pi / 2
    theta: float = math.pi / 2
    moments: list[float] | None = None
    solver: str = "bbr"
    t_max: float = 30.0
    n_steps: int = 601
    n_traj: int = mastereq.DEFAULT_N_TRAJ
    seed: int = 0
    n_max: int | None = None
    truncation: str = "abort"
    output: str = "ptbec_out"
    format: str = "csv"
    grid: int = 100
    multistart: int = 6
    map_t_max: float | None = None
    checkpoint: str | None = None
    workers: int | None = None
    solvers: list[str] = field(default_factory=lambda: ["bbr"])
    gamma_sweep: str | None = None
    g_sweep: str | None = None
    plot: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; choose from {', '.join(SOLVERS)}")
        for s in self.solvers:
            if s not in SOLVERS:
                raise ConfigError(f"unknown solver {s!r} in solvers")
        if self.format != "csv":
            raise ConfigError(f"unsupported output format {self.format!r}")
        if self.truncation not in ("abort", "warn"):
            raise ConfigError("truncation must be 'abort' or 'warn'")
        if isinstance(self.N0, bool) or int(self.N0) != self.N0 or self.N0 < 1:
            raise ConfigError(f"N0 must be a positive integer, got {self.N0!r}")
        self.N0 = int(self.N0)
        if self.n_steps < 2:
            raise ConfigError("n_steps must be >= 2")
        if not self.t_max > 0:
            raise ConfigError("t_max must be > 0")
        if self.n_traj < 1:
            raise ConfigError("n_traj must be >= 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.moments is not None and len(self.moments) != 14:
            raise ConfigError("moments must list 14 values")
        if self.grid < 2 or self.multistart < 1:
            raise ConfigError("grid must be >= 2 and multistart >= 1")
        for name in ("gamma_sweep", "g_sweep"):
            v = getattr(self, name)
            if v is not None:
                parse_sweep(v)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d)

    def params(self) -> SystemParams:
        return make_params(J=self.J, g=self.g, N0=self.N0, gamma_loss=self.gamma,
                           balanced=self.balanced, gamma_gain=self.gamma_gain)

    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.n_steps)


def parse_sweep(text: str) -> np.ndarray:
    """``start:stop:count`` to an inclusive linear grid."""
    try:
        a, b, n = text.split(":")
        a, b, n = float(a), float(b), int(n)
    except ValueError as exc:
        raise ConfigError(f"sweep must look like start:stop:count, got {text!r}") from exc
    if n < 1:
        raise ConfigError("sweep count must be >= 1")
    return np.linspace(a, b, n)


# --------------------------------------------------------------------- solvers

def _initial_moments(cfg: RunConfig) -> np.ndarray:
    if cfg.moments is not None:
        return np.array(cfg.moments, dtype=float)
    return product_state_moments(cfg.phi, cfg.theta, cfg.N0)


def _purity(m):
    return np.sum(m[:, :3] ** 2, axis=1) / m[:, 3] ** 2


def run_solver(cfg: RunConfig, solver: str) -> tuple[list[str], list[np.ndarray], dict]:
    """Columns (after ``t``) and metadata for one solver on the shared time grid."""
    params = cfg.params()
    t = cfg.time_grid()
    if solver in ("bbr", "bbr-neglect"):
        mode = "full" if solver == "bbr" else "neglect"
        s = bbr.integrate_bbr(_initial_moments(cfg), t, params, mode)
        m = s.moments
        names = list(MOMENTS) + ["D" + c for c in COV_NAMES] + ["P", "stable"]
        cols = [m[:, k] for k in range(14)] + [s.purity, np.isfinite(m[:, 3])]
        return names, cols, {"status": ode.STATUS_NAMES[s.status], "t_stop": s.t_stop,
                             "n_steps_taken": s.n_steps}
    if solver == "analytic":
        if cfg.g != 0:
            raise ConfigError("the analytic solver requires g = 0")
        y0 = _initial_moments(cfg)
        kappa = analytic.solve_kappas(y0, params)
        m = analytic.analytic_solution(kappa, params, t)
        lo, hi = analytic.envelopes(kappa, params, t)
        return (list(MOMENTS) + ["P", "P_lower", "P_upper"],
                [m[:, k] for k in range(4)] + [analytic.purity(m), lo, hi],
                {"kappa": dataclasses.asdict(kappa)})
    if solver == "gpe":
        if cfg.moments is not None:
            raise ConfigError("the gpe solver needs (phi, theta), not explicit moments")
        s = meanfield.integrate_gpe(meanfield.MeanFieldState.from_angles(cfg.phi, cfg.theta),
                                    t, params)
        m = meanfield.gpe_moments(s, cfg.N0)
        a, an = s.abs_raw, s.abs_normalized
        return (["abs_c1", "abs_c2", "phase", "norm2", "abs_c1_normalized", "abs_c2_normalized"]
                + list(MOMENTS) + ["P"],
                [a[:, 0], a[:, 1], s.relative_phase, s.norm2, an[:, 0], an[:, 1]]
                + [m[:, k] for k in range(4)] + [_purity(m)],
                {"status": ode.STATUS_NAMES[s.status], "t_stop": s.t_stop})
    if cfg.moments is not None:
        raise ConfigError(f"the {solver} solver needs (phi, theta), not explicit moments")
    n_max = cfg.n_max if cfg.n_max is not None else default_n_max(cfg.N0)
    basis = FockBasis(n_max)
    psi0 = product_state(cfg.phi, cfg.theta, cfg.N0, basis)
    if solver == "dense":
        if basis.dim > DENSE_MAX_DIM:
            raise ConfigError(f"dense solver: basis dimension {basis.dim} exceeds {DENSE_MAX_DIM}; "
                              "lower N0 or n_max")
        d = mastereq.dense_moment_series(psi0.density_matrix(sparse=True), t, params,
                                         truncation=cfg.truncation)
        names = list(MOMENTS) + ["D" + c for c in COV_NAMES] + ["P", "trace", "min_eigenvalue",
                                                                  "top_shell"]
        cols = ([d.moments[:, k] for k in range(14)]
                + [_purity(d.moments), d.trace, d.min_eigenvalue, d.top_shell])
        return names, cols, {"n_max": n_max}
    r = mastereq.run_trajectories(psi0, t, params, cfg.n_traj, cfg.seed, truncation=cfg.truncation,
                                  workers=cfg.workers or 1)
    names = (list(MOMENTS) + ["D" + c for c in COV_NAMES]
             + [k + "_err" for k in MOMENTS] + ["D" + c + "_err" for c in COV_NAMES]
             + ["P", "P_err"])
    cols = ([r.means[:, k] for k in range(14)] + [r.stderr[:, k] for k in range(14)]
            + [r.purity, r.purity_stderr])
    return names, cols, {"n_max": n_max, "n_traj": r.n_traj, "seed": r.seed,
                         "max_top_shell": r.max_top_shell, "n_loss_jumps": int(r.n_loss.sum()),
                         "n_gain_jumps": int(r.n_gain.sum())}


# -------------------------------------------------------------------- commands

def _meta(cfg: RunConfig, kind: str, start: float, argv, **extra) -> dict:
    return {"kind": kind, "version": git_version(), "config": cfg.to_dict(),
            "command": ["ptbec"] + list(argv), "seed": cfg.seed,
            "wall_time": time.perf_counter() - start, **extra}


def _finish(cfg: RunConfig, csv_path: Path, meta: dict) -> list[Path]:
    written = [csv_path, write_json(csv_path.with_suffix(".json"), meta)]
    if cfg.plot:
        from .plotting import render
        written.append(render(csv_path))
    return written


def _stem(cfg: RunConfig) -> Path:
    p = Path(cfg.output)
    if p.suffix == ".csv":
        p = p.with_suffix("")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_simulate(cfg: RunConfig, argv) -> list[Path]:
    start = time.perf_counter()
    names, cols, info = run_solver(cfg, cfg.solver)
    path = write_csv(_stem(cfg).with_suffix(".csv"), ["t"] + names, [cfg.time_grid()] + cols)
    return _finish(cfg, path, _meta(cfg, "series", start, argv, solver=cfg.solver, solver_info=info))


def cmd_compare(cfg: RunConfig, argv) -> list[Path]:
    start = time.perf_counter()
    if len(cfg.solvers) < 2:
        raise ConfigError("compare needs at least two solvers")
    header, columns, info, series = ["t"], [cfg.time_grid()], {}, {}
    for s in cfg.solvers:
        names, cols, meta = run_solver(cfg, s)
        info[s] = meta
        series[s] = dict(zip(names, cols))
        for q in list(MOMENTS) + ["P"] + [k + "_err" for k in MOMENTS] + ["P_err"]:
            if q in series[s]:
                header.append(f"{s}:{q}")
                columns.append(series[s][q])
    ref = cfg.solvers[0]
    deviation = {}
    for s in cfg.solvers[1:]:
        deviation[s] = {}
        for q in list(MOMENTS) + ["P"]:
            a, b = series[ref][q], series[s][q]
            ok = np.isfinite(a) & np.isfinite(b)
            deviation[s][q] = float(np.max(np.abs(a[ok] - b[ok]))) if ok.any() else math.nan
            if q == "P" and "P_err" in series[s]:
                # Monte Carlo bands: largest deviation in units of the standard error
                err = np.maximum(series[s]["P_err"][ok], 1e-12)
                deviation[s]["P_z_max"] = float(np.max(np.abs(a[ok] - b[ok]) / err))
    for s, d in deviation.items():
        print(f"compare {ref} vs {s}: " + ", ".join(f"max|d{q}|={v:.3g}" for q, v in d.items()),
              file=sys.stderr)
    path = write_csv(_stem(cfg).with_suffix(".csv"), header, columns)
    return _finish(cfg, path, _meta(cfg, "compare", start, argv, reference=ref,
                                    max_abs_deviation=deviation, solver_info=info))


def cmd_revival_map(cfg: RunConfig, argv) -> list[Path]:
    start = time.perf_counter()
    stem = _stem(cfg)
    checkpoint = cfg.checkpoint or str(stem) + ".checkpoint.jsonl"
    m = analysis.revival_map(cfg.params(), cfg.grid, cfg.grid, t_max=cfg.map_t_max,
                             checkpoint=checkpoint, workers=cfg.workers, progress=True)
    path = write_matrix(stem.with_suffix(".csv"), "theta\\phi", m.theta_grid, m.phi_grid, m.delta_p)
    write_matrix(Path(str(stem) + "_stability.csv"), "theta\\phi", m.theta_grid, m.phi_grid,
                 m.stability)
    write_matrix(Path(str(stem) + "_tstar.csv"), "theta\\phi", m.theta_grid, m.phi_grid,
                 m.t_strongest)
    i, j = m.argmax()
    return _finish(cfg, path, _meta(cfg, "revival-map", start, argv, t_max=m.t_max,
                                    dt=m.metadata["dt"], stable_fraction=m.stable_fraction,
                                    median_delta_p=float(np.median(m.delta_p)),
                                    best={"phi": m.phi_grid[j], "theta": m.theta_grid[i],
                                          "delta_p": m.delta_p[i, j]},
                                    checkpoint=checkpoint))


def cmd_maximize(cfg: RunConfig, argv) -> list[Path]:
    start = time.perf_counter()
    if cfg.gamma_sweep and cfg.g_sweep:
        raise ConfigError("give at most one of gamma_sweep and g_sweep")
    if cfg.gamma_sweep:
        label, values = "gamma", parse_sweep(cfg.gamma_sweep)
    elif cfg.g_sweep:
        label, values = "g", parse_sweep(cfg.g_sweep)
    else:
        label, values = "gamma", np.array([cfg.gamma])
    records = []
    for v in values:
        c = dataclasses.replace(cfg, **{label: float(v)})
        o = analysis.maximize_revival(c.params(), cfg.multistart, t_max=cfg.map_t_max)
        rec = {label: float(v), "phi": o.phi, "theta": o.theta, "delta_p_max": o.delta_p_max,
               "t_star": o.t_star, "gradient_norm": o.gradient_norm}
        records.append(rec)
        print(f"maximize {label}={v:.6g}: dP_max={o.delta_p_max:.6g} t*={o.t_star:.6g} "
              f"at phi={o.phi:.6g} theta={o.theta:.6g}", file=sys.stderr, flush=True)
    keys = [label, "phi", "theta", "delta_p_max", "t_star", "gradient_norm"]
    path = write_csv(_stem(cfg).with_suffix(".csv"), keys,
                     [np.array([r[k] for r in records]) for k in keys])
    return _finish(cfg, path, _meta(cfg, "maximize", start, argv, sweep=label, optima=records))


COMMANDS = {"simulate": cmd_simulate, "compare": cmd_compare,
            "revival-map": cmd_revival_map, "maximize": cmd_maximize}
_HELP = {"simulate": f"time series from one solver ({', '.join(SOLVERS)})",
         "compare": "run several solvers on one grid and report deviations",
         "revival-map": "strongest purity revival over a phi x theta grid of initial states",
         "maximize": "maximize the revival strength over initial states, optionally swept"}


# ----------------------------------------------------------------- arguments

_FLAGS = {
    "J": float, "g": float, "N0": int, "gamma": float, "gamma_gain": float, "phi": float,
    "theta": float, "solver": str, "t_max": float, "n_steps": int, "n_traj": int, "seed": int,
    "n_max": int, "truncation": str, "output": str, "grid": int, "multistart": int,
    "map_t_max": float, "checkpoint": str, "workers": int, "gamma_sweep": str, "g_sweep": str,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptbec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", help="YAML run configuration; flags override it")
        for key, typ in _FLAGS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
        p.add_argument("--unbalanced", action="store_true", help="take gamma_gain as given")
        p.add_argument("--solvers", default=None, help="comma-separated list for compare")
        p.add_argument("--plot", action="store_true", help="render a PNG next to the CSV")
        p.add_argument("--dump-config", action="store_true",
                       help="print the resolved configuration and exit")
    rp = sub.add_parser("report", help="render figures for existing CSV outputs")
    rp.add_argument("csv", nargs="+")
    return parser


def resolve_config(args) -> RunConfig:
    base = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        base = RunConfig.loads(text).to_dict()
    for key in _FLAGS:
        v = getattr(args, key)
        if v is not None:
            base[key] = v
    if args.unbalanced:
        base["balanced"] = False
    if args.solvers:
        base["solvers"] = [s.strip() for s in args.solvers.split(",") if s.strip()]
    if args.plot:
        base["plot"] = True
    if base.get("workers") is None and os.environ.get(analysis.WORKERS_ENV):
        base["workers"] = analysis.default_workers()
    return RunConfig.from_dict(base)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "report":
        from .plotting import render
        for c in args.csv:
            print(render(c))
        return EXIT_OK
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        cfg.params()
        written = COMMANDS[args.command](cfg, argv)
    except (ConfigError, ParameterError, yaml.YAMLError, ValueError) as exc:
        print(f"ptbec: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TruncationError, ode.IntegrationError, mastereq.NumericalFailure,
            analytic.SingularEnvelopeError, analysis.NoStableOptimumError,
            FloatingPointError) as exc:
        print(f"ptbec: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for p in written:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
