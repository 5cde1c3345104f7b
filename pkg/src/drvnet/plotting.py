"""Figures and image exports written next to the CSV/JSONL reports."""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .evaluation import METRIC_NAMES, TABLE_HEADERS, roc_curve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "lines.linewidth": 1.2,
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_roc(curves, path):
    """``curves`` maps a label to ``(scores, truth)`` arrays (pooled pixels)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        for label, (scores, truth) in curves.items():
            fps, tps = roc_curve(scores, truth)
            if fps[-1] == 0 or tps[-1] == 0:
                continue
            ax.plot(fps / fps[-1], tps / tps[-1], label=label)
        ax.plot([0, 1], [0, 1], color="0.7", linestyle=":", linewidth=0.8)
        ax.set_xlabel("1 - specificity")
        ax.set_ylabel("sensitivity")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        if curves:
            ax.legend(loc="lower right")
        return _save(fig, path)


def plot_training_history(histories, path):
    """Training/validation loss per epoch (left) and learning rate (right)."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for label, history in histories.items():
            epochs = [r["epoch"] for r in history]
            line, = ax_loss.plot(epochs, [r["loss"] for r in history], label=f"{label} train")
            val = [r["val_loss"] for r in history]
            if any(v is not None for v in val):
                ax_loss.plot(epochs, [np.nan if v is None else v for v in val], color=line.get_color(),
                             linestyle="--", label=f"{label} val")
            ax_lr.step(epochs, [r["lr"] for r in history], where="post", label=label)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("composite loss")
        ax_loss.legend()
        ax_lr.set_yscale("log")
        ax_lr.set_xlabel("epoch")
        ax_lr.set_ylabel("learning rate")
        return _save(fig, path)


def plot_metric_bars(reports, path):
    """Grouped bars, one group per metric, one bar per report (with stderr whiskers)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 2.8))
        x = np.arange(len(METRIC_NAMES))
        width = 0.8 / max(1, len(reports))
        for i, r in enumerate(reports):
            vals = [getattr(r, k) for k in METRIC_NAMES]
            errs = [r.stderr.get(k, 0.0) if r.n > 1 else 0.0 for k in METRIC_NAMES]
            ax.bar(x + (i - (len(reports) - 1) / 2) * width, vals, width, yerr=errs, label=r.label, capsize=2)
        ax.set_xticks(x, [TABLE_HEADERS[k] for k in METRIC_NAMES])
        ax.set_ylim(0, 1.05)
        ax.legend(loc="lower left", ncol=2)
        return _save(fig, path)


def save_probability_png(path, prob_map):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(prob_map, 0, 1) * 255).round().astype(np.uint8)).save(path)
    return path


def save_mask_png(path, mask):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255).save(path)
    return path
