"""Figures written next to the text/CSV reports (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _finish(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_training_log(records: Sequence, path, title: str = "") -> Path:
    """Loss (left axis) and accuracy or Dice (right axis) per epoch."""
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r.loss for r in records], "o-", color="tab:blue", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:blue")
    score = [r.acc if r.acc is not None else r.dice for r in records]
    if all(s is not None for s in score):
        ax2 = ax.twinx()
        label = "train acc" if records[0].acc is not None else "train dice"
        ax2.plot(epochs, score, "s--", color="tab:orange", label=label)
        ax2.set_ylabel(label, color="tab:orange")
        ax2.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def plot_ablation(rows: Sequence[dict], path, metric: str = "accuracy") -> Path:
    """One bar per variant at its median, with per-seed values as dots."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for i, v in enumerate(variants):
        vals = [r[metric] for r in rows if r["variant"] == v]
        ax.bar(i, np.median(vals), color="0.8", edgecolor="k")
        ax.plot([i] * len(vals), vals, "k.", ms=6)
    ax.set_xticks(range(len(variants)), variants)
    ax.set_ylabel(f"test {metric}")
    lo = min(r[metric] for r in rows)
    ax.set_ylim(max(0.0, lo - 0.1), 1.01)
    return _finish(fig, path)


def plot_attention(x: np.ndarray, wc: np.ndarray, ws: np.ndarray, path, title: str = "") -> Path:
    """Input mean map, spatial gate and channel gate of one sample."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    axes[0].imshow(x.mean(axis=0), cmap="gray")
    axes[0].set_title("input (channel mean)")
    im = axes[1].imshow(ws, cmap="viridis", vmin=0, vmax=1)
    axes[1].set_title("spatial gate")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    axes[2].bar(np.arange(len(wc)), wc, color="tab:green")
    axes[2].set_ylim(0, 1)
    axes[2].set_title("channel gate")
    axes[2].set_xlabel("channel")
    for a in axes[:2]:
        a.set_xticks([])
        a.set_yticks([])
    if title:
        fig.suptitle(title)
    return _finish(fig, path)
