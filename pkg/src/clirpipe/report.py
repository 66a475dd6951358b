"""Matplotlib figures for evaluation reports."""

from __future__ import annotations

from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricResult  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "clirpipe",
}
COLORS = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"]


def _save(fig, path) -> None:
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_metrics(results: List[MetricResult], path, title: str = "") -> None:
    """Grouped bars per topic, one colour per metric, dashed line at each mean."""
    topics = sorted({t for r in results for t in r.per_topic})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(topics) + 2), 3.0))
        x = np.arange(len(topics))
        width = 0.8 / max(len(results), 1)
        for i, r in enumerate(results):
            color = COLORS[i % len(COLORS)]
            vals = [r.per_topic.get(t, 0.0) for t in topics]
            ax.bar(x + (i - (len(results) - 1) / 2) * width, vals, width, label=r.name, color=color)
            ax.axhline(r.mean, color=color, ls="--", lw=0.8)
        ax.set_xticks(x)
        ax.set_xticklabels(topics, rotation=90)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("topic")
        ax.set_ylabel("score")
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        _save(fig, path)


def plot_run_summary(summary: Dict[str, List[MetricResult]], path) -> None:
    """Mean of each metric for several runs side by side."""
    names = list(summary)
    metrics = [r.name for r in summary[names[0]]] if names else []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names) + 1.5), 3.0))
        x = np.arange(len(names))
        width = 0.8 / max(len(metrics), 1)
        for i, m in enumerate(metrics):
            vals = [summary[n][i].mean for n in names]
            bars = ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=m,
                          color=COLORS[i % len(COLORS)])
            ax.bar_label(bars, fmt="%.3f", fontsize=6, padding=1)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0, 1.1)
        ax.set_ylabel("mean over topics")
        ax.legend(loc="upper left", frameon=False, ncol=len(metrics))
        _save(fig, path)
