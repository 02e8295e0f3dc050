"""Matplotlib figures for the evaluation report."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no software/version stamp so reruns produce identical files
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_correlation(corr: np.ndarray, scales, path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(np.nan_to_num(corr, nan=0.0), vmin=-1, vmax=1, cmap="RdBu_r")
    ticks = range(len(scales))
    ax.set_xticks(ticks, [str(s) for s in scales])
    ax.set_yticks(ticks, [str(s) for s in scales])
    for i in ticks:
        for j in ticks:
            v = corr[i, j]
            ax.text(j, i, "n/a" if np.isnan(v) else f"{v:.2f}", ha="center", va="center", fontsize=8)
    ax.set_title("Class-accuracy correlation")
    fig.colorbar(im, ax=ax)
    _save(fig, path)


def plot_subsets(reports, path) -> None:
    labels = ["+".join(str(s) for s in r.scales) for r in reports]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(reports) + 1.5), 3.6))
    colors = ["tab:orange" if r.best_in_block else "tab:blue" for r in reports]
    ax.bar(range(len(reports)), [r.mca for r in reports], color=colors)
    ax.set_xticks(range(len(reports)), labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("MCA (%)")
    ax.set_ylim(0, 100)
    ax.set_title("Scale subsets (orange: best of its size)")
    _save(fig, path)


def plot_class_accuracy(ca: np.ndarray, scales, names, path) -> None:
    """One line per class: CA at each scale."""
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    x = np.arange(len(scales))
    for k, row in enumerate(ca):
        ax.plot(x, row, marker="o", label=names[k] if names else str(k))
    ax.set_xticks(x, [str(s) for s in scales])
    ax.set_xlabel("scale (shortest side, px)")
    ax.set_ylabel("CA (%)")
    ax.set_ylim(-5, 105)
    ax.legend(fontsize=7)
    _save(fig, path)


def plot_training_curves(histories: dict, path) -> None:
    """``histories`` maps scale to a list of epoch records."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.4))
    for scale, hist in sorted(histories.items()):
        ep = [h.epoch for h in hist]
        a1.plot(ep, [h.val_loss for h in hist], label=str(scale))
        a2.plot(ep, [h.val_mca for h in hist], label=str(scale))
    a1.set_xlabel("epoch")
    a1.set_ylabel("validation loss")
    a2.set_xlabel("epoch")
    a2.set_ylabel("validation MCA (%)")
    a2.legend(title="scale", fontsize=7)
    _save(fig, path)
