"""Matplotlib figures written next to the tab-separated reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}
# fixed metadata keeps PNG bytes stable between runs
_META = {"Software": None}


def _save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return Path(path)


def _smooth(y, k):
    y = np.asarray(y, dtype=float)
    if k <= 1 or y.size < k:
        return y
    c = np.cumsum(np.insert(y, 0, 0.0))
    return (c[k:] - c[:-k]) / k


def loss_curve(losses, path, title="pretraining", window=100):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(np.arange(len(losses)), losses, lw=0.4, alpha=0.35, color="0.5")
        s = _smooth(losses, window)
        ax.plot(np.arange(s.size) + window - 1, s, lw=1.2, color="C0", label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("noise MSE")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def finetune_curves(flog, path):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, sub, label in zip(axes, ("SR", "SD"), ("style reconstruction", "disentanglement")):
            y = flog.losses(sub)
            if y:
                ax.plot(y, lw=0.5, color="0.5", alpha=0.5)
                epochs = sorted({r[0] for r in flog.rows if r[1] == sub})
                means = [flog.epoch_mean(sub, e) for e in epochs]
                xs = [np.mean([i for i, r in enumerate(r for r in flog.rows if r[1] == sub) if r[0] == e])
                      for e in epochs]
                ax.plot(xs, means, "o-", color="C1", label="epoch mean")
                ax.legend()
            ax.set_title(label)
            ax.set_xlabel("gradient step")
        axes[0].set_ylabel("loss")
        return _save(fig, path)


def sweep_plot(xs, ys, path, xlabel, ylabel, title=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.plot(xs, ys, "o-")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def metric_bars(rows, path):
    """Mean value per metric; ``rows`` are ``(metric, content, style, value)``."""
    by = {}
    for metric, _, sid, value in rows:
        by.setdefault(metric, []).append(value)
    names = sorted(by)
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.bar(names, [float(np.mean(by[n])) for n in names], color="C0")
        ax.set_ylabel("mean")
        ax.tick_params(axis="x", rotation=20)
        return _save(fig, path)
