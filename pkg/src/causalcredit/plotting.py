"""Training-curve and ablation figures written straight to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training_curves(rows: Sequence[dict], keys: Sequence[str], path: str | Path,
                         title: str = "") -> Path:
    """One panel per logged quantity against the training step."""
    keys = [k for k in keys if any(k in r and r[k] is not None for r in rows)]
    if not rows or not keys:
        raise ValueError("nothing to plot")
    fig, axes = plt.subplots(len(keys), 1, figsize=(6, 2.2 * len(keys)), sharex=True,
                             squeeze=False)
    steps = [r["step"] for r in rows]
    for ax, key in zip(axes[:, 0], keys):
        ys = [np.nan if r.get(key) is None else float(r[key]) for r in rows]
        ax.plot(steps, ys, marker="o", ms=3)
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
        if key in ("recon_mse", "heldout_mse", "loss") and np.nanmin(ys) > 0:
            ax.set_yscale("log")
    axes[-1, 0].set_xlabel("step")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(summary: Sequence[dict], metric_keys: Sequence[str], path: str | Path,
                  xlabel: str) -> Path:
    """Mean with one-std error bars per sweep value, values on a categorical axis."""
    if not summary:
        raise ValueError("empty summary")
    labels = [str(r["value"]) for r in summary]
    x = np.arange(len(labels))
    fig, axes = plt.subplots(1, len(metric_keys), figsize=(4.2 * len(metric_keys), 3.4),
                             squeeze=False)
    for ax, key in zip(axes[0], metric_keys):
        means = [r[f"{key}_mean"] for r in summary]
        stds = [r[f"{key}_std"] for r in summary]
        ax.errorbar(x, means, yerr=stds, fmt="o-", capsize=4)
        ax.set_xticks(x, labels)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
