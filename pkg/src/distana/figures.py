"""Matplotlib renderings of run artifacts, written next to the CSVs.

Everything here is presentation only: each figure re-reads the same
numbers that land in curve.csv / context CSVs / summary.json, so
disabling figures (output.figures = false) changes no experiment
result.  The Agg backend keeps this usable on headless machines.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_curve",
    "render_context_maps",
    "render_eval_rollout",
]


def render_curve(curve: list[float], path: str | Path) -> Path:
    """Training curve, log-scaled MSE over epochs."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(curve)), curve, lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train MSE")
    if min(curve) > 0:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_context_maps(
    maps: dict[str, np.ndarray], path: str | Path, truth: np.ndarray | None = None
) -> Path:
    """Heatmap panel of context maps (e.g. snapshots over iterations)."""
    path = Path(path)
    items = list(maps.items())
    if truth is not None:
        items = [("ground truth", truth)] + items
    n = len(items)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4))
    if n == 1:
        axes = [axes]
    for ax, (title, values) in zip(axes, items):
        im = ax.imshow(np.asarray(values), cmap="viridis")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_eval_rollout(
    predictions: np.ndarray,
    targets: np.ndarray,
    per_seq_mse: list[float],
    path: str | Path,
) -> Path:
    """Per-sequence MSE plus prediction/target snapshots of one rollout."""
    path = Path(path)
    steps = predictions.shape[0]
    picks = sorted({0, steps // 3, (2 * steps) // 3, steps - 1})
    fig, axes = plt.subplots(2, len(picks) + 1, figsize=(3.0 * (len(picks) + 1), 5.6))
    ax = axes[0][0]
    ax.plot(range(len(per_seq_mse)), per_seq_mse, "o-", ms=3)
    ax.set_xlabel("test sequence")
    ax.set_ylabel("closed-loop MSE")
    if min(per_seq_mse) > 0:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    axes[1][0].axis("off")
    vmax = max(float(np.abs(targets).max()), 1e-12)
    for col, t in enumerate(picks, start=1):
        for row, (label, data) in enumerate(
            (("pred", predictions[t]), ("target", targets[t]))
        ):
            ax = axes[row][col]
            ax.imshow(data, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
            ax.set_title(f"{label} +{t + 1}", fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
