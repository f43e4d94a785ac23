"""Figure rendering for the report paths (loss curves, F1 bars, TC plots).

All functions write PNG files next to the delimited tables; the Agg backend
is forced so they work headless.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import CLASS_NAMES, OTHER, TC_NEG, TC_POS


def plot_loss_curves(log_csv, out_png) -> Path:
    """Loss components over iterations from a training log."""
    rows = list(csv.DictReader(open(log_csv, newline="")))
    iters = [int(r["iteration"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("gan_ab", "gan_ba", "cycle", "seg", "total"):
        ax.plot(iters, [float(r[key]) for r in rows], label=key, linewidth=0.9)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=8, ncol=3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return Path(out_png)


def plot_f1_bars(scores: dict, out_png, title: str = "Segmentation F1") -> Path:
    """Bar chart of per-class, binary and mean F1 scores."""
    keys = [OTHER, TC_NEG, TC_POS, "tc", "mean"]
    labels = [CLASS_NAMES.get(k, str(k).upper()) for k in keys[:3]] + ["TC", "Avg."]
    values = [scores[k] if scores.get(k) is not None else 0.0 for k in keys]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    bars = ax.bar(labels, values, color="#e08030")
    for bar, value in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, value + 0.01, f"{value:.3f}",
                ha="center", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return Path(out_png)


def plot_concordance(per_image, out_png) -> Path:
    """Scatter of predicted vs true TC scores with the identity line."""
    pairs = [(t, p) for _, p, t in per_image if t is not None]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if pairs:
        true, pred = zip(*pairs)
        ax.scatter(true, pred, s=14, alpha=0.7, color="#3060c0")
    ax.plot([0, 100], [0, 100], "k--", linewidth=0.8)
    ax.set_xlabel("true TC score")
    ax.set_ylabel("predicted TC score")
    ax.set_xlim(-2, 102)
    ax.set_ylim(-2, 102)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return Path(out_png)


def plot_tc_bins(bins, out_png) -> Path:
    """Bar plot of per-bin mean and std of predicted scores."""
    labels = [b.label for b in bins]
    means = [b.mean if b.mean is not None else np.nan for b in bins]
    stds = [b.std if b.std is not None else 0.0 for b in bins]
    counts = [b.count for b in bins]
    x = np.arange(len(bins))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(x, means, yerr=stds, capsize=3, color="#e08030")
    for xi, count in zip(x, counts):
        ax.text(xi, 2, f"n={count}", ha="center", fontsize=7, rotation=90)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("predicted TC score")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)
    return Path(out_png)
