"""Matplotlib figures rendered next to the delimited/JSON outputs.

All figures go through the Agg backend (headless, deterministic) and strip
the Software metadata chunk so repeated runs are byte-identical.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import MetricReport
from .negatives import SweepRow
from .trainer import TrainReport

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": None}}


def plot_threshold_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    """MAP / NDCG@10 / Recall@100 against the de-noising threshold."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r.threshold for r in rows]
    for label, ys in (
        ("MAP", [r.map for r in rows]),
        ("NDCG@10", [r.ndcg10 for r in rows]),
        ("Recall@100", [r.recall100 for r in rows]),
    ):
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("hard-negative filtering threshold")
    ax.set_ylabel("score")
    ax.set_title("Retrieval effectiveness by de-noising threshold")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def plot_loss_curves(report: TrainReport, path: str | Path) -> None:
    """Train/dev loss per epoch with the best-dev epoch marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [e.epoch for e in report.epochs]
    dev = [e.dev_loss for e in report.epochs]
    train = [(e.epoch, e.train_loss) for e in report.epochs if e.train_loss is not None]
    ax.plot(epochs, dev, marker="o", label="dev loss")
    if train:
        ax.plot([t[0] for t in train], [t[1] for t in train], marker="s", label="train loss")
    ax.axvline(report.best_epoch, color="gray", linestyle="--", alpha=0.7, label="best epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"Training curves (stop: {report.stopping_reason})")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def plot_metric_histogram(reports: Mapping[str, MetricReport], path: str | Path) -> None:
    """Per-query NDCG@10 histogram per run, means as vertical lines."""
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, (name, rep) in enumerate(sorted(reports.items())):
        values = list(rep.per_query.values())
        color = colors[i % len(colors)]
        ax.hist(values, bins=20, range=(0, 1), alpha=0.5, label=f"{name} (mean {rep.mean:.3f})", color=color)
        ax.axvline(rep.mean, color=color, linestyle="--")
    ax.set_xlabel("per-query NDCG@10")
    ax.set_ylabel("queries")
    ax.set_title("Per-query metric distribution")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
