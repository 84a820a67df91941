"""Figures rendered from emitted data files (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import read_csv, read_json, read_matrix  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_series(csv_path, out_path=None) -> Path:
    """Purity (and particle number when available) against time."""
    header, data = read_csv(csv_path)
    col = {h: k for k, h in enumerate(header)}
    t = data[:, col["t"]]
    fig, axes = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for name in header:
        if name == "P" or name.endswith(":P"):
            axes[0].plot(t, data[:, col[name]], lw=1, label=name.split(":")[0] if ":" in name else "P")
        if name in ("P_lower", "P_upper"):
            axes[0].plot(t, data[:, col[name]], "k--", lw=0.8)
        if name == "n" or name.endswith(":n"):
            axes[1].plot(t, data[:, col[name]], lw=1, label=name.split(":")[0] if ":" in name else "n")
        if name == "norm2":
            axes[1].plot(t, data[:, col[name]], lw=1, label="norm2")
    if "P_err" in col:
        p, e = data[:, col["P"]], data[:, col["P_err"]]
        axes[0].fill_between(t, p - e, p + e, alpha=0.3)
    axes[0].set_ylabel("P")
    axes[1].set_ylabel("n")
    axes[1].set_xlabel("t")
    for ax in axes:
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8)
    return _save(fig, out_path or Path(csv_path).with_suffix(".png"))


def plot_map(csv_path, out_path=None) -> Path:
    theta, phi, dp = read_matrix(csv_path)
    fig, ax = plt.subplots(figsize=(5.5, 4))
    mesh = ax.pcolormesh(phi, theta, dp, shading="nearest", vmin=0, vmax=1, cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="dP")
    ax.set_xlabel("phi")
    ax.set_ylabel("theta")
    return _save(fig, out_path or Path(csv_path).with_suffix(".png"))


def plot_optima(csv_path, out_path=None) -> Path:
    header, data = read_csv(csv_path)
    col = {h: k for k, h in enumerate(header)}
    x = data[:, col[header[0]]]
    fig, axes = plt.subplots(2, 1, figsize=(5, 5), sharex=True)
    axes[0].plot(x, data[:, col["delta_p_max"]], "o-")
    axes[0].set_ylabel("dP_max")
    axes[1].plot(x, data[:, col["t_star"]], "o-")
    axes[1].set_ylabel("t*")
    axes[1].set_xlabel(header[0])
    return _save(fig, out_path or Path(csv_path).with_suffix(".png"))


def render(csv_path, out_path=None) -> Path:
    """Pick the figure type from the metadata written next to ``csv_path``."""
    csv_path = Path(csv_path)
    meta_path = csv_path.with_suffix(".json")
    kind = read_json(meta_path).get("kind", "series") if meta_path.exists() else "series"
    if kind == "revival-map":
        return plot_map(csv_path, out_path)
    if kind == "maximize":
        return plot_optima(csv_path, out_path)
    return plot_series(csv_path, out_path)


__all__ = ["plot_series", "plot_map", "plot_optima", "render"]
