"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_training_curves(loss: list[float], alpha: list[float],
                         path: str) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(loss, lw=1.0)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].set_title("training loss")
    axes[1].plot(alpha, lw=1.0, color="tab:orange")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("fusion weight")
    axes[1].set_title("fusion weight trajectory")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_iou_histogram(counts: list[int], path: str) -> None:
    n = len(counts)
    centers = [(i + 0.5) / n for i in range(n)]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(centers, counts, width=0.9 / n, color="tab:blue", edgecolor="white")
    ax.set_xlabel("best-GT mask IoU")
    ax.set_ylabel("predictions")
    ax.set_title("mask IoU distribution")
    ax.set_xlim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_metric_bars(groups: dict[str, dict[str, float]], path: str,
                     title: str = "") -> None:
    """Grouped bars: outer keys are run labels, inner keys metric names."""
    labels = list(groups)
    metrics = sorted({m for vals in groups.values() for m in vals})
    width = 0.8 / max(1, len(labels))
    fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(metrics), 3.4))
    for i, label in enumerate(labels):
        xs = [j + i * width for j in range(len(metrics))]
        ys = [groups[label].get(m, 0.0) for m in metrics]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(metrics))])
    ax.set_xticklabels(metrics)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
