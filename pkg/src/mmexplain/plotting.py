"""Report figures written to files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRIC_ORDER = ("iou", "bleu4", "meteor", "rouge_l", "cider", "vqa_accuracy")


def plot_loss_curves(log: Sequence[dict], path: str | Path) -> Path:
    """Task losses and weights against step, from metric-log records."""
    steps = [r["step"] for r in log]
    fig, (ax_l, ax_w) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("L_ans", "L_text", "L_vis", "total"):
        ys = [r.get(key) for r in log]
        if any(y is not None for y in ys):
            ax_l.plot(steps, [np.nan if y is None else y for y in ys], label=key)
    ax_l.set_yscale("symlog")
    ax_l.set_xlabel("step")
    ax_l.set_title("losses")
    ax_l.legend()
    for key in ("w_ans", "w_text", "w_vis"):
        ys = [r.get(key) for r in log]
        if any(y is not None for y in ys):
            ax_w.plot(steps, [np.nan if y is None else y for y in ys], label=key)
    ax_w.set_xlabel("step")
    ax_w.set_title("task weights")
    ax_w.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_metric_bars(rows: Mapping[str, Mapping[str, float | None]], path: str | Path) -> Path:
    """Grouped bars, one group per metric and one bar per row (config)."""
    names = list(rows)
    metrics = [m for m in METRIC_ORDER if any(rows[n].get(m) is not None for n in names)]
    fig, ax = plt.subplots(figsize=(max(6, 1.4 * len(metrics) * max(1, len(names)) / 2), 4))
    width = 0.8 / max(1, len(names))
    x = np.arange(len(metrics))
    for k, n in enumerate(names):
        vals = [rows[n].get(m) for m in metrics]
        ax.bar(x + k * width, [0 if v is None else v for v in vals], width, label=n)
    ax.set_xticks(x + width * (len(names) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylabel("score x100")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_per_sample(rows: Sequence[dict], path: str | Path) -> Path:
    """Histograms of the per-sample scores present in ``rows``."""
    metrics = [m for m in METRIC_ORDER if rows and m in rows[0]]
    fig, axes = plt.subplots(1, max(1, len(metrics)), figsize=(3 * max(1, len(metrics)), 3), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        ax.hist([r[m] for r in rows], bins=20, range=(0, 10 if m == "cider" else 1))
        ax.set_title(m)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def overlay(image: np.ndarray, mask: np.ndarray, color=(1.0, 0.0, 0.0), alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend ``color`` into an H x W x 3 [0, 1] image where the mask is
    on, scaled by mask strength. A zero mask returns the image unchanged."""
    img = np.asarray(image, np.float64)
    m = np.clip(np.asarray(mask, np.float64), 0, 1)[..., None] * alpha
    return img * (1 - m) + np.asarray(color) * m


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
