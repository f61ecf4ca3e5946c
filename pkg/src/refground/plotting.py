"""Report figures: ROC curve, training loss curve, adaptation before/after bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import roc_curve  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_roc(scores, labels, path, auc: float | None = None) -> Path:
    fpr, tpr, _ = roc_curve(scores, labels)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=1.5, label=f"AUC {auc:.3f}" if auc is not None else None)
    ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    if auc is not None:
        ax.legend(loc="lower right")
    return _save(fig, path)


def plot_loss_curve(history: list, path, keys=None) -> Path:
    """One line per loss component over epochs."""
    keys = keys or [k for k in history[0] if k.startswith("l_") or k == "total"]
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in keys:
        ax.plot(epochs, [row[k] for row in history], marker=".", label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def plot_adapt_bars(before: dict, after: dict, path, keys=("ACC", "AUC", "IoU_m", "F1")) -> Path:
    keys = [k for k in keys if k in before and k in after]
    x = np.arange(len(keys))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(x - 0.2, [before[k] for k in keys], 0.4, label="before")
    ax.bar(x + 0.2, [after[k] for k in keys], 0.4, label="after")
    ax.set_xticks(x, keys)
    ax.set_ylim(0, 1)
    ax.legend()
    return _save(fig, path)
