"""Figure rendering for the report path.

Every figure is written to a file next to the delimited output; nothing here
feeds back into the numerics.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .simcore import PARAM_NAMES

_SAVE_KW = {"dpi": 150, "bbox_inches": "tight", "metadata": {"Software": None}}


def plot_curve_overlay(truth: np.ndarray, t_obs: int,
                       candidates: list[np.ndarray], path, title: str = "") -> None:
    """Truth curve, observed prefix, and candidate curves from the posterior."""
    fig, ax = plt.subplots(figsize=(6, 4))
    days = np.arange(1, len(truth) + 1)
    for i, cand in enumerate(candidates):
        ax.plot(days, cand, color="tab:blue", alpha=0.15, lw=0.8,
                label="posterior samples" if i == 0 else None)
    ax.plot(days, truth, color="black", lw=2, label="truth")
    ax.plot(days[:t_obs], truth[:t_obs], color="tab:red", lw=2, ls="--",
            label=f"observed ({t_obs} days)")
    ax.set_xlabel("day")
    ax.set_ylabel("cumulative cases")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_posterior_marginals(samples_by_method: dict[str, np.ndarray],
                             truth: np.ndarray | None, box, path) -> None:
    """Histogram of each parameter's marginal, one panel per parameter."""
    fig, axes = plt.subplots(2, 3, figsize=(11, 6))
    for i, (ax, name) in enumerate(zip(axes.ravel(), PARAM_NAMES)):
        lo, hi = box.lows[i], box.highs[i]
        bins = np.linspace(lo, hi, 30)
        for method, samples in samples_by_method.items():
            ax.hist(samples[:, i], bins=bins, density=True, alpha=0.45, label=method)
        if truth is not None:
            ax.axvline(truth[i], color="black", ls="--", lw=1.5)
        ax.set_title(name, fontsize=9)
        ax.tick_params(labelsize=7)
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_report_summary(report_rows: list[dict], path,
                        metric: str = "curve_rmse_pct1e3") -> None:
    """Grouped bars of mean +/- std per method and observation window."""
    rows = [r for r in report_rows if r["metric"] == metric]
    if not rows:
        raise ValueError(f"no report rows with metric {metric!r}")
    methods = sorted({r["method"] for r in rows})
    t_obs_vals = sorted({r["t_obs"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / len(methods)
    for m_i, method in enumerate(methods):
        means = [next(r["mean"] for r in rows
                      if r["method"] == method and r["t_obs"] == t) for t in t_obs_vals]
        stds = [next(r["std"] for r in rows
                     if r["method"] == method and r["t_obs"] == t) for t in t_obs_vals]
        pos = np.arange(len(t_obs_vals)) + (m_i - (len(methods) - 1) / 2) * width
        ax.bar(pos, means, width=width, yerr=stds, capsize=3, label=method)
    ax.set_xticks(np.arange(len(t_obs_vals)))
    ax.set_xticklabels([f"T_obs={t}" for t in t_obs_vals])
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_training_history(train_losses, val_losses, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(train_losses, label="train")
    if val_losses:
        ax.semilogy(val_losses, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean squared error (code space)")
    ax.legend()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
