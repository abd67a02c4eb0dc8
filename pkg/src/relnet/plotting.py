"""Figures written next to the text/JSON reports."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def learning_curves(epochs: Sequence[int], train_loss: Sequence[float],
                    valid_err: Sequence[float], path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax1.plot(epochs, train_loss, color="C0")
        ax1.set_yscale("log")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train loss")
        ax2.plot(epochs, valid_err, color="C1")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation error (%)")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def task_errors(rows: List[dict], path, label: str = "RelNet") -> Path:
    """Bar chart of test error per task; missing tasks are left blank."""
    tasks = [r["task"] for r in rows]
    errs = [np.nan if r["error"] is None else r["error"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 2.8))
        ax.bar(tasks, errs, color="C0", label=label)
        ax.set_xticks(tasks)
        ax.set_xlabel("bAbI task")
        ax.set_ylabel("test error (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def attention_map(attention: np.ndarray, path, title: Optional[str] = None) -> Path:
    attention = np.asarray(attention)
    D = attention.shape[0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3))
        im = ax.imshow(attention, cmap="viridis", vmin=0.0)
        ax.set_xlabel("slot j")
        ax.set_ylabel("slot i")
        ticks = np.arange(D) if D <= 20 else np.arange(0, D, max(1, D // 10))
        ax.set_xticks(ticks)
        ax.set_yticks(ticks)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def gate_activity(entity_gates: np.ndarray, path) -> Path:
    """Heatmap of entity gates, one row per sentence read."""
    g = np.asarray(entity_gates)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 0.3 * max(len(g), 3) + 1))
        ax.imshow(g, cmap="magma", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_xlabel("entity slot")
        ax.set_ylabel("sentence")
        return _save(fig, path)
