"""PNG figures rendered next to the CSV outputs (headless matplotlib)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

from . import dctfeat  # noqa: E402

# no timestamp or version string, so the same data gives the same bytes
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def roc_figure(points, path, auc=None):
    """``points`` are (threshold, fpr, tpr) triples as from metrics.roc_points."""
    fpr = [p[1] for p in points]
    tpr = [p[2] for p in points]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    label = "model" if auc is None else f"AUC = {auc:.4f}"
    ax.step(fpr, tpr, where="post", label=label)
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def history_figure(history, path):
    """Loss curves and validation accuracy per epoch."""
    ep = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(ep, [h["train_loss"] for h in history], label="train")
    ax1.plot(ep, [h["val_loss"] for h in history], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy")
    ax1.legend()
    ax2.plot(ep, [h["val_acc"] for h in history], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation accuracy")
    for ax in (ax1, ax2):
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    fig.tight_layout()
    _save(fig, path)


def histogram_figure(hist, path, rows=(0, 4, 8, 15), title=None):
    """Bar charts of selected AC coefficient histograms (row k = zig-zag position k+1)."""
    counts = np.asarray(hist.counts if hasattr(hist, "counts") else hist)
    bins = np.arange(dctfeat.VALUE_MIN, dctfeat.VALUE_MAX + 1)
    fig, axes = plt.subplots(len(rows), 1, figsize=(7, 1.8 * len(rows)), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, r in zip(axes, rows):
        ax.bar(bins, counts[r], width=1.0)
        ax.set_xlim(-20.5, 20.5)
        ax.set_ylabel(f"AC {r + 1}")
    axes[-1].set_xlabel("quantized coefficient value")
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    _save(fig, path)
