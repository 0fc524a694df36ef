"""Report figures. Import order matters: the Agg backend must be selected
before pyplot so rendering works headless and output does not depend on any
display server."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_error_curves", "plot_quadrant", "plot_samples"]

_SAVE = {"dpi": 150, "bbox_inches": "tight"}


def plot_error_curves(report, schedule, path) -> None:
    """Per-step site errors with the dividing points marked."""
    fig, ax = plt.subplots(figsize=(7.0, 3.4))
    for point in schedule.dividing_points:
        ax.axvline(point, color="0.88", linewidth=0.7, zorder=0)
    ax.plot(report.steps, report.e_total, label="E_o", color="tab:red", linewidth=1.4)
    ax.plot(report.steps, report.e_cache, label="E_c", color="tab:blue", linewidth=1.0)
    ax.plot(report.steps, report.e_quant, label="E_q", color="tab:green", linewidth=1.0)
    ax.set_xlabel("denoising step")
    ax.set_ylabel("mean |error|")
    ax.legend(loc="upper left", frameon=False)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_quadrant(distances: dict[str, float], path) -> None:
    """One bar per configuration, sample distance to the reference run."""
    names = list(distances)
    values = [distances[n] for n in names]
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.bar(range(len(names)), values, color="tab:purple", width=0.6)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("sliced Wasserstein")
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_samples(samples_by_config: dict[str, np.ndarray], path) -> None:
    """Scatter panels of the final 2D samples, one per configuration."""
    n = len(samples_by_config)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    for ax, (name, pts) in zip(axes[0], samples_by_config.items()):
        ax.scatter(pts[:, 0], pts[:, 1], s=3, alpha=0.5, color="tab:blue",
                   edgecolors="none")
        ax.set_title(name, fontsize=9)
        ax.set_aspect("equal")
        ax.tick_params(labelsize=7)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
