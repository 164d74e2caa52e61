"""Report figures, rendered off-screen to image files."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ConfusionMatrix, RocCurve  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def plot_window_curve(curves: Mapping[str, Sequence[tuple[int, float, float]]], path) -> None:
    """Mean unknown detection and white-listed accuracy across types versus window size."""
    rows = np.array([[r[1], r[2]] for c in curves.values() for r in c], dtype=float)
    windows = [r[0] for r in next(iter(curves.values()))]
    rows = rows.reshape(len(curves), len(windows), 2)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(windows, np.nanmean(rows[:, :, 0], axis=0), "o-", label="unknown detected")
        ax.plot(windows, np.nanmean(rows[:, :, 1], axis=0), "s--", label="white-listed correct")
        ax.set_xlabel("window size (sessions)")
        ax.set_ylabel("mean rate over left-out types")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right")
        fig.savefig(path)
        plt.close(fig)


def plot_roc(roc: RocCurve, path, title: str = "") -> None:
    fpr = [p[0] for p in roc.points]
    tpr = [p[1] for p in roc.points]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.plot(fpr, tpr, "-", drawstyle="steps-post", label=f"AUC = {roc.auc:.3f}")
        ax.plot([0, 1], [0, 1], ":", color="grey")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right")
        fig.savefig(path)
        plt.close(fig)


def plot_confusion(cm: ConfusionMatrix, path, title: str = "") -> None:
    counts = cm.counts.astype(float)
    sums = counts.sum(axis=1, keepdims=True)
    share = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
    n = len(cm.labels)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(1 + 0.6 * n, 0.8 + 0.6 * n))
        im = ax.imshow(share, cmap="Blues", vmin=0, vmax=1)
        ax.set_xticks(range(n), cm.labels, rotation=60, ha="right")
        ax.set_yticks(range(n), cm.labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("actual")
        for i in range(n):
            for j in range(n):
                if counts[i, j]:
                    ax.text(j, i, int(counts[i, j]), ha="center", va="center", fontsize=7,
                            color="white" if share[i, j] > 0.5 else "black")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.savefig(path)
        plt.close(fig)
