"""Figure rendering for metric reports (written alongside the CSV output)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import ROMAN, MetricReport


def render_report_figure(report: MetricReport, path, title=None):
    """Grouped per-class bars for precision, recall and F-score."""
    classes = list(report.classes)
    x = np.arange(len(classes))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(6.0, 1.0 * len(classes) + 2), 3.5))
    ax.bar(x - width, report.precision, width, label="precision")
    ax.bar(x, report.recall, width, label="recall")
    ax.bar(x + width, report.fscore, width, label="F-score")
    ax.set_xticks(x)
    ax.set_xticklabels([ROMAN[c] for c in classes])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(title or f"{report.label} (mean F {report.mean_all:.2f})")
    ax.legend(loc="lower right", fontsize="small")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_training_curve(epoch_losses, path, title="training loss"):
    """Per-epoch mean loss curve for a training run."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(np.arange(1, len(epoch_losses) + 1), epoch_losses, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
