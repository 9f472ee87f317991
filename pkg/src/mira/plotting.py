"""Figures written next to delimited outputs. Always uses the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fusion import AttentionTrace  # noqa: E402
from .metrics import EvalReport  # noqa: E402


def figure_path(out: str | Path) -> Path:
    return Path(out).with_suffix(".png")


def plot_trace(trace: AttentionTrace, path: str | Path, title: str = "Attention over input components") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(trace.weights) + 2), 3.2))
    ax.bar(trace.component_labels, trace.weights, color="#4c72b0")
    ax.set_ylim(0, max(1.0, max(trace.weights) * 1.05))
    ax.set_ylabel("weight")
    ax.set_title(title)
    for i, w in enumerate(trace.weights):
        ax.text(i, w, f"{w:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2))
    names = ["BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L"]
    left.bar(names, [*report.bleu, report.rouge_l], color="#55a868")
    left.set_ylim(0, 1)
    left.set_title(f"Report generation (n={report.n_report})")
    right.bar(["Conv", "Details"], [report.conv.ratio, report.detail.ratio], color="#c44e52")
    right.set_ylim(0, 1)
    right.set_title("Question answering accuracy")
    for i, acc in enumerate((report.conv, report.detail)):
        right.text(i, acc.ratio, str(acc), ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
