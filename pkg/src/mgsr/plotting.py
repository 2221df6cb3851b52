"""Matplotlib figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import DensityExport  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_losses(metrics: Sequence, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [m.step for m in metrics]
    for attr, label in (("loss_total", "total"), ("loss_sft", "sft"), ("loss_dac", "dac"), ("loss_span", "span")):
        ys = [getattr(m, attr) for m in metrics]
        if any(ys):
            ax.plot(steps, ys, label=label, lw=1)
    val = [(m.step, m.validation_loss) for m in metrics if m.validation_loss is not None]
    if val:
        ax.plot(*zip(*val), "o-", label="validation", ms=3)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_density(export: DensityExport, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(export.grid, export.original, label="all classes")
    ax.plot(export.grid, export.clipped, label="clipped classes")
    ax.set_xlabel("teacher probability")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_bars(labels: Sequence[str], values: Sequence[float], path: str | Path, ylabel: str) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(labels) + 1), 3.5))
    ax.bar(range(len(labels)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30)
    ax.set_ylabel(ylabel)
    return _save(fig, path)
