"""Matplotlib figure rendering for the CLI report paths.

Every function writes a PNG next to the delimited output it illustrates
and returns the path it wrote. The Agg backend is forced so rendering
works headless."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dataset import CLASS_ORDER

CLASS_COLORS = {
    "center": "#d62728",
    "near": "#ff7f0e",
    "peripheral": "#1f77b4",
    "background": "#7f7f7f",
}


def training_curves_png(log, path) -> str:
    """Loss and learning-rate curves over epochs."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(log.epochs, log.train_losses, label="train loss", color="#1f77b4")
    ax.plot(log.epochs, log.val_losses, label="validation loss",
            color="#d62728")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy loss")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.step(log.epochs, log.learning_rates, where="post",
             color="#2ca02c", alpha=0.6, label="learning rate")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    handles, labels = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(handles + h2, labels + l2, loc="upper right", fontsize=8)
    ax.set_title("training")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def class_error_png(table, target: str, path) -> str:
    """Bar chart of per-class error rates from an evaluation table."""
    names = [cls.value for cls in CLASS_ORDER if cls in table.errors]
    values = [table.errors[cls] for cls in CLASS_ORDER if cls in table.errors]
    colors = [CLASS_COLORS.get(n, "#333333") for n in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, values, color=colors)
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(),
                f"{v:.1f}%", ha="center", va="bottom", fontsize=9)
    ax.set_ylabel("error rate (%)")
    ax.set_ylim(0, max(values + [1.0]) * 1.25)
    ax.set_title(f"{target}: per-class error "
                 f"(overall accuracy {table.overall_accuracy:.2f}%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def tsne_scatter_png(points, embeddings, path) -> str:
    """Two-panel scatter of the 2-d projection: colored by patch class and
    by correctness of the prediction."""
    coords = points.coords
    classes = np.array([c.value for c in embeddings.classes])
    correct = embeddings.predicted_labels == embeddings.true_labels
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 5))
    for cls in CLASS_ORDER:
        sel = classes == cls.value
        if sel.any():
            ax1.scatter(coords[sel, 0], coords[sel, 1], s=8,
                        color=CLASS_COLORS[cls.value], label=cls.value,
                        alpha=0.75, linewidths=0)
    ax1.legend(fontsize=8, markerscale=2)
    ax1.set_title(f"patch classes (perplexity {points.perplexity:g})")
    ax2.scatter(coords[correct, 0], coords[correct, 1], s=8, color="#2ca02c",
                alpha=0.6, linewidths=0, label="correct")
    if (~correct).any():
        ax2.scatter(coords[~correct, 0], coords[~correct, 1], s=14,
                    color="#d62728", alpha=0.9, linewidths=0, label="misclassified")
    ax2.legend(fontsize=8, markerscale=2)
    ax2.set_title(f"prediction outcome (KL {points.final_kl:.3f})")
    for ax in (ax1, ax2):
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def phantom_preview_png(image, mask, path) -> str:
    """First synthesized phantom beside its annotation mask."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 5.2))
    ax1.imshow(image.pixels, cmap="gray", vmin=0, vmax=image.max_value)
    ax1.set_title(f"phantom ({image.height}x{image.width})")
    ax2.imshow(image.pixels, cmap="gray", vmin=0, vmax=image.max_value)
    rows, cols = np.nonzero(mask)
    if len(rows):
        ax2.scatter(cols, rows, s=1.5, color="#d62728", linewidths=0)
    ax2.set_title(f"annotated pixels ({int(mask.sum())})")
    for ax in (ax1, ax2):
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def inference_summary_png(image, result, path) -> str:
    """Input image beside the overlay (mask tint plus cluster boxes), with
    the stage tallies in the panel titles."""
    from .pipeline import render_overlay

    overlay = render_overlay(image, result.segmentation.mask,
                             result.clusters)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 5.6))
    ax1.imshow(image.pixels, cmap="gray", vmin=0, vmax=image.max_value)
    ax1.set_title(f"input ({image.height}x{image.width})")
    ax2.imshow(overlay)
    roi = result.roi_set
    ax2.set_title(
        f"{roi.tiles_evaluated}/{roi.tiles_total} tiles kept, "
        f"{len(result.regions.areas)} components, "
        f"{len(result.clusters.clusters)} clusters")
    for ax in (ax1, ax2):
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
