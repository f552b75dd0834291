"""Matplotlib rendering of experiment outputs.

Every experiment writes plot-ready CSVs; these helpers render the matching
PNG next to them. Imported lazily by the experiment runner so library users
without a display stack pay nothing.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


def plot_metric_curves(path: str, curves: dict[str, tuple[np.ndarray, np.ndarray]],
                       ylabel: str, title: str, logy: bool = False) -> None:
    """One line per label; curves maps label -> (mean, std) over rounds."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for k, (label, (mean, std)) in enumerate(sorted(curves.items())):
        x = np.arange(len(mean))
        color = _COLORS[k % len(_COLORS)]
        ax.plot(x, mean, label=label, color=color)
        if np.any(std > 0):
            ax.fill_between(x, mean - std, mean + std, alpha=0.2, color=color)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("communication round")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_delta_curves(path: str, runs: list[tuple[str, list[float]]],
                      bound: float | None, title: str) -> None:
    """Angle-distance trajectories on a log axis with the geometric bound."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for k, (label, deltas) in enumerate(runs):
        ax.semilogy(np.arange(len(deltas)), np.maximum(deltas, 1e-18),
                    color=_COLORS[k % len(_COLORS)], alpha=0.7, label=label)
    if bound is not None and runs:
        d0 = runs[0][1][0]
        t = np.arange(len(runs[0][1]))
        ax.semilogy(t, d0 * bound**t, "k--", label=f"bound {bound:.3f}^t")
    ax.set_xlabel("iteration")
    ax.set_ylabel("angle distance")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_mc_floor(path: str, delta0s: list[float], predicted: list[float],
                  empirical: list[float], std_err: list[float], title: str) -> None:
    """Monte Carlo estimates with 4-sigma bars against the closed form."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    ax.errorbar(delta0s, empirical, yerr=[4 * s for s in std_err], fmt="o",
                capsize=4, label="Monte Carlo (4 s.e.)")
    ax.plot(delta0s, predicted, "x--", color="k", label="closed form")
    ax.set_xlabel("initial angle distance")
    ax.set_ylabel("global loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
