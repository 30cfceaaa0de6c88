"""Figures written to files with the non-interactive Agg backend."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_history(history: Sequence[Mapping], path, title: str = "") -> None:
    """Loss and metric curves for the train/val/test masks."""
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [rec["epoch"] for rec in history]
    for split in ("train", "val", "test"):
        loss = [rec.get(f"{split}_loss") for rec in history]
        if all(v is None for v in loss):
            continue
        ax_loss.plot(epochs, loss, label=split)
        ax_metric.plot(epochs, [rec.get(f"{split}_metric") for rec in history], label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("metric")
    ax_metric.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_depth_sweep(rows: Iterable[Mapping], path) -> None:
    """Train accuracy against tree depth, one line per model."""
    series = defaultdict(list)
    for row in rows:
        series[row["model"]].append((int(row["depth"]), float(row["train_accuracy"])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for model, points in sorted(series.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=model)
    ax.set_xlabel("tree depth r")
    ax.set_ylabel("train accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
