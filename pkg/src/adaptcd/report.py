"""Figures written next to the JSON/NDJSON run outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_training_curves(records, path):
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["train_loss"] for r in records], color="k", marker="o", ms=3)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss (focal + Jaccard)")
    for key, label in (("val_f1", "F1"), ("val_iou", "IoU"), ("val_oa", "OA")):
        ax_metric.plot(epochs, [r[key] for r in records], marker="o", ms=3, label=label)
    ax_metric.set_ylim(0, 1)
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("validation")
    ax_metric.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_predictions(samples, preds, path, limit=4):
    """One row per sample: frame A, frame B, reference mask, predicted mask."""
    rows = min(limit, len(samples))
    fig, axes = plt.subplots(rows, 4, figsize=(8, 2 * rows), squeeze=False)
    titles = ("A", "B", "label", "prediction")
    for i in range(rows):
        s = samples[i]
        panels = (
            s.image_a.transpose(1, 2, 0),
            s.image_b.transpose(1, 2, 0),
            s.mask,
            preds[i],
        )
        for j, (ax, img) in enumerate(zip(axes[i], panels)):
            if img.ndim == 2:
                ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            else:
                ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
        axes[i][0].set_ylabel(s.id, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_partition(reports, path):
    """Trainable vs frozen scalar counts per tuning method (log scale)."""
    methods = [r["method"] for r in reports]
    x = np.arange(len(methods))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(x - 0.2, [max(r["trainable_count"], 1) for r in reports], 0.4, label="trainable")
    ax.bar(x + 0.2, [max(r["frozen_count"], 1) for r in reports], 0.4, label="frozen")
    ax.bar(x - 0.2, [max(r["peft_count"], 1) for r in reports], 0.4, color="none", edgecolor="k", hatch="//", label="PEFT only")
    ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(methods, rotation=20)
    ax.set_ylabel("scalars")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
