"""Bar charts of grouped metrics, one PNG per group key."""
from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import MetricReport  # noqa: E402


def plot_group(key: str, reports: Mapping[str, MetricReport], path: str | os.PathLike,
               metric: str = "mrr") -> Path:
    """Grouped bars of ``metric`` for every value of ``key``, one bar per run.

    Runs that lack a group value simply have no bar there.
    """
    runs = list(reports)
    values = sorted({v for r in reports.values() for v in r.groups.get(key, {})})
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(values) * max(1, len(runs)) + 2), 3.5))
    width = 0.8 / max(1, len(runs))
    x = np.arange(len(values))
    for i, run in enumerate(runs):
        group = reports[run].groups.get(key, {})
        ys = [group[v][metric] if v in group else np.nan for v in values]
        ax.bar(x + (i - (len(runs) - 1) / 2) * width, ys, width, label=run)
    ax.set_xticks(x)
    ax.set_xticklabels(values, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric.upper() if metric == "mrr" else metric)
    ax.set_title(key)
    ax.set_ylim(0, 1)
    if len(runs) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curve(losses: Sequence[float], path: str | os.PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(np.arange(1, len(losses) + 1), losses, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
