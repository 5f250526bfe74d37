"""Figure rendering for the reporting commands.

Every report path that writes a delimited table also renders a chart next
to it.  The non-interactive backend is forced before pyplot loads so the
CLI works headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .analytics import ConceptRow, RegionReport  # noqa: E402
from .training import EpochMetrics  # noqa: E402


def _finish(fig, path) -> str:
    fig.tight_layout()
    tmp = f"{path}.tmp.png"
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    os.replace(tmp, path)
    return str(path)


def training_curves(metrics: list[EpochMetrics], path) -> str:
    """Loss and accuracy per epoch on twin axes."""
    epochs = [m.epoch for m in metrics]
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, [m.train_loss for m in metrics], color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [m.train_acc for m in metrics], color="tab:blue", label="train acc")
    if any(m.val_acc is not None for m in metrics):
        ax_acc.plot(epochs, [m.val_acc for m in metrics], color="tab:green",
                    linestyle="--", label="val acc")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    lines, labels = ax_loss.get_legend_handles_labels()
    lines2, labels2 = ax_acc.get_legend_handles_labels()
    ax_acc.legend(lines + lines2, labels + labels2, loc="center right", fontsize=8)
    ax_loss.set_title("training")
    return _finish(fig, path)


def ablation_bars(rows: list[dict], path) -> str:
    """Horizontal accuracy bars for the component study table."""
    names = [r["name"] for r in rows]
    accs = [r["test_acc"] for r in rows]
    colors = ["tab:orange" if r.get("section") == "emotion-graph" else "tab:blue" for r in rows]
    fig, ax = plt.subplots(figsize=(8, 0.42 * len(rows) + 1.5))
    ypos = range(len(rows))
    ax.barh(ypos, accs, color=colors)
    ax.set_yticks(ypos)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("test accuracy")
    ax.set_xlim(0.0, 1.0)
    ax.set_title("component study")
    return _finish(fig, path)


def sweep_curve(values: list, accs: list[float], xlabel: str, path) -> str:
    """Accuracy against one swept structural knob."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(values, accs, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(values)
    ax.set_title(f"sweep over {xlabel}")
    return _finish(fig, path)


def concept_bars(rows: list[ConceptRow], path, top_k: int = 10) -> str:
    """Per-category tf-idf bars for the highest ranked concepts."""
    categories = sorted({r.category for r in rows})
    fig, axes = plt.subplots(1, max(1, len(categories)),
                             figsize=(3.2 * max(1, len(categories)), 3.5), squeeze=False)
    for ax, c in zip(axes[0], categories):
        top = [r for r in rows if r.category == c and r.rank <= top_k]
        ax.barh([r.concept for r in top], [r.tfidf for r in top], color="tab:purple")
        ax.invert_yaxis()
        ax.set_title(f"category {c}", fontsize=9)
        ax.tick_params(labelsize=7)
        ax.set_xlabel("tf-idf", fontsize=8)
    return _finish(fig, path)


def attention_bars(report: RegionReport, path) -> str:
    """Attention per active object for one image."""
    fig, ax = plt.subplots(figsize=(6, 0.4 * max(1, len(report.rows)) + 1.5))
    if report.rows:
        labels = [f"{r.concept} (slot {r.slot})" for r in report.rows]
        ax.barh(labels, [r.attention for r in report.rows], color="tab:green")
        ax.invert_yaxis()
        ax.set_xlim(0.0, 1.0)
    else:
        ax.text(0.5, 0.5, "no active objects", ha="center", va="center")
    ax.set_xlabel("attention")
    ax.set_title(f"image {report.image_id}: predicted {report.predicted}")
    return _finish(fig, path)
