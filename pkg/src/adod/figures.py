"""Matplotlib figure rendering for training, evaluation and ablation reports.

Everything renders through the Agg backend straight to files, with the PNG
metadata stripped so a rerun with identical inputs produces byte-identical
images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

_SAVE_KWARGS = {"dpi": 100, "metadata": {"Software": None}}


def save_loss_curves(breakdowns, path) -> None:
    """Per-epoch loss components plus the weighted total on one axes pair."""
    epochs = range(len(breakdowns))
    fig, (ax_components, ax_total) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("coord", "obj", "noobj", "cls", "domain"):
        ax_components.plot(epochs, [getattr(b, key) for b in breakdowns], label=key)
    ax_components.set_xlabel("epoch")
    ax_components.set_ylabel("component loss")
    ax_components.legend(fontsize=8)
    ax_components.set_title("components")
    ax_total.plot(epochs, [b.total for b in breakdowns], color="black")
    ax_total.set_xlabel("epoch")
    ax_total.set_ylabel("total loss")
    ax_total.set_title("weighted total")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_pr_curves(pr_curves, class_names, path) -> None:
    """One precision-recall trace per class."""
    fig, ax = plt.subplots(figsize=(6, 5))
    for class_id, name in enumerate(class_names):
        recall, precision = pr_curves.get(class_id, ([], []))
        if len(recall):
            ax.plot(recall, precision, label=name)
        else:
            ax.plot([], [], label=f"{name} (no data)")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_ablation_bars(labels, map_clean, map_cast, path) -> None:
    """Grouped mAP bars: clean-domain split vs strongest-cast split per config."""
    positions = range(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(labels)), 4.5))
    ax.bar(
        [p - width / 2 for p in positions],
        [v if v is not None else 0.0 for v in map_clean],
        width,
        label="clean split",
    )
    ax.bar(
        [p + width / 2 for p in positions],
        [v if v is not None else 0.0 for v in map_cast],
        width,
        label="cast split",
    )
    ax.set_xticks(list(positions))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mAP (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
