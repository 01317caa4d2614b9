"""Figure rendering for analysis and training reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 140, "metadata": {"Software": "slottok"}}


def cumulative_mass_figure(curves: dict[str, np.ndarray], path: str | Path) -> None:
    """Cumulative importance mass per factor, against the uniform baseline."""
    fig, ax = plt.subplots(figsize=(6, 4))
    L = None
    for factor in sorted(curves):
        curve = np.asarray(curves[factor])
        L = curve.shape[0]
        ax.plot(np.arange(1, L + 1), curve, label=factor)
    if L:
        ax.plot(np.arange(1, L + 1), np.arange(1, L + 1) / L, "k--", lw=1, label="uniform")
        ax.legend(fontsize=8)
    ax.set_xlabel("slots, sorted by importance")
    ax.set_ylabel("cumulative importance mass")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def profile_figure(factor: str, g: np.ndarray, path: str | Path) -> None:
    """Per-slot importance scores for one factor."""
    g = np.asarray(g)
    fig, ax = plt.subplots(figsize=(6, 2.8))
    ax.bar(np.arange(g.shape[0]), g, width=0.8)
    ax.set_xlabel("slot")
    ax.set_ylabel("importance")
    ax.set_title(factor, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def heatmap_figure(profiles: dict[str, np.ndarray], path: str | Path) -> None:
    """Row-normalized importance profiles, one row per factor."""
    factors = sorted(profiles)
    mat = np.stack([np.asarray(profiles[f]) / max(np.asarray(profiles[f]).sum(), 1e-300) for f in factors])
    fig, ax = plt.subplots(figsize=(6, 0.6 * len(factors) + 1.5))
    im = ax.imshow(mat, aspect="auto", cmap="viridis")
    ax.set_yticks(range(len(factors)), factors, fontsize=8)
    ax.set_xlabel("slot")
    fig.colorbar(im, ax=ax, label="normalized importance")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def loss_curve_figure(trace, path: str | Path) -> None:
    """Train and validation loss per epoch."""
    epochs = [row.epoch for row in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [row.train_loss for row in trace], label="train")
    ax.plot(epochs, [row.val_loss for row in trace], label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
