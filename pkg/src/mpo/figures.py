"""Matplotlib renderings of the training dynamics and experiment comparisons.

Every report-producing CLI path writes one of these PNGs next to its CSV
output. Figures are secondary artifacts: the CSVs remain the source of
truth for any numeric claim.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .training import ComparisonTable, TrainingLog

_SAVEFIG = dict(dpi=110, metadata={"Software": None})


def render_training_curves(log: TrainingLog, path) -> None:
    """Loss terms per step (left) and held-out trajectory per eval (right)."""
    steps = [r.step for r in log.records]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    ax = axes[0]
    if log.stage == "sft":
        ax.plot(steps, [r.ce for r in log.records], lw=0.9, label="ce")
    else:
        ax.plot(steps, [r.dpo for r in log.records], lw=0.9, label="dpo")
        ax.plot(steps, [r.ce for r in log.records], lw=0.9, label="ce")
        ax.plot(steps, [r.combined for r in log.records], lw=0.9, alpha=0.6, label="combined")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"{log.stage} training terms")
    ax.legend(fontsize=8)
    ax = axes[1]
    if log.evals:
        esteps = [e.step for e in log.evals]
        ax.plot(esteps, [e.cer for e in log.evals], marker="o", ms=3, label="held-out CER")
        ax.plot(esteps, [e.ce for e in log.evals], marker="s", ms=3, label="held-out CE")
        ax.plot(esteps, [e.prosody for e in log.evals], marker="^", ms=3, label="held-out prosody")
        ax.plot(esteps, [e.spk_sim for e in log.evals], marker="v", ms=3, label="held-out spk-sim")
        ax.set_xlabel("step")
        ax.set_title("held-out trajectory")
        ax.legend(fontsize=8)
    else:
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def render_comparison(table: ComparisonTable, path) -> None:
    """Grouped bars, one panel per metric, best bar emphasized."""
    titles = ("CER (lower better)", "speaker sim (higher better)", "prosody RMSE (lower better)")
    n = len(table.labels)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2 + 0.1 * n))
    xs = np.arange(n)
    for j, (ax, title) in enumerate(zip(axes, titles)):
        vals = table.values[:, j]
        colors = ["#d62728" if table.best[i, j] else "#7f7f7f" for i in range(n)]
        ax.bar(xs, vals, color=colors)
        ax.set_xticks(xs)
        ax.set_xticklabels(table.labels, rotation=30, ha="right", fontsize=8)
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
