"""Figures written next to the report tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
    "svg.hashsalt": "tripletrank",
}


def figsize(scale=1.0, ratio=None):
    width = 6.0 * scale
    ratio = (np.sqrt(5.0) - 1.0) / 2.0 if ratio is None else ratio
    return width, width * ratio


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamps or version strings, so reruns are byte-identical
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_similarity_profile(profile, path):
    """Mean oracle similarity (in percent) against rank in the ground truth."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        ranks = np.arange(1, len(profile) + 1)
        ax.plot(ranks, 100 * np.asarray(profile), color="k")
        ax.axhline(50, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("rank in ground-truth list")
        ax.set_ylabel("mean similarity (%)")
        ax.set_xlim(1, max(2, len(profile)))
        ax.set_ylim(0, 100)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_curves(curves, path):
    """``curves`` maps a system label to (train losses, validation losses).

    Loss scales differ between the triplet and tagging systems, so each
    system gets its own panel.
    """
    labels = list(curves)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(labels), 1, figsize=figsize(0.8, 0.35 * max(1, len(labels))),
                                 squeeze=False, sharex=True)
        for ax, label in zip(axes[:, 0], labels):
            train, val = curves[label]
            epochs = np.arange(1, len(train) + 1)
            ax.plot(epochs, train, label="train")
            ax.plot(epochs, val, label="validation", ls="--")
            ax.set_ylabel("loss")
            ax.set_title(label, loc="left")
        axes[0, 0].legend(frameon=False)
        axes[-1, 0].set_xlabel("epoch")
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(rows, metrics, path):
    """Grouped bars of mean metric values with 95% interval whiskers.

    ``rows`` is a list of (label, {metric: (mean, halfwidth)}).
    """
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(1.0))
        width = 0.8 / max(1, len(rows))
        x = np.arange(len(metrics))
        for k, (label, summary) in enumerate(rows):
            means = [summary[m][0] for m in metrics]
            errs = [summary[m][1] for m in metrics]
            ax.bar(x + (k - (len(rows) - 1) / 2) * width, means, width, yerr=errs,
                   capsize=2, label=label)
        ax.set_xticks(x)
        ax.set_xticklabels([f"{m}@k" for m in metrics])
        ax.set_ylabel("score (%)")
        ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
        return _save(fig, path)
