"""PNG figures rendered next to the CSV outputs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metrics(metrics: Sequence, path) -> Path:
    """Loss terms per epoch, plus kNN accuracy on a second axis when present."""
    epochs = [m.epoch for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("l_iraug", "l_intra", "l_inter", "total"):
        ax.plot(epochs, [getattr(m, key) for m in metrics], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    knn = [(m.epoch, m.knn_acc) for m in metrics if m.knn_acc is not None]
    if knn:
        ax2 = ax.twinx()
        ax2.plot(*zip(*knn), "ko--", markersize=3, label="kNN acc")
        ax2.set_ylabel("kNN accuracy")
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [r["variant"] for r in rows]
    accs = [r["knn_acc"] for r in rows]
    ax.bar(names, accs, color=["0.6", "tab:blue", "tab:orange", "tab:green"][: len(rows)])
    lo = min(accs)
    ax.set_ylim(max(0.0, lo - 0.1), min(1.0, max(accs) + 0.05))
    for i, a in enumerate(accs):
        ax.text(i, a, f"{a:.3f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("kNN accuracy")
    return _save(fig, path)


def plot_sweep(param: str, values: Sequence[float], accs: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, accs, "o-")
    ax.set_xlabel(param)
    ax.set_ylabel("kNN accuracy")
    return _save(fig, path)


def plot_projection(coords: np.ndarray, labels: Optional[np.ndarray], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    c = None if labels is None else labels
    ax.scatter(coords[:, 0], coords[:, 1], c=c, cmap="tab10", s=6)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    return _save(fig, path)
