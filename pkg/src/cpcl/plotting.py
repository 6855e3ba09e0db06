"""Report figures written next to the line-delimited outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5) - 1.0) / 2.0
COLORS = ["#08589e", "#2b8cbe", "#4eb3d3", "#7bccc4", "#a8ddb5", "#e34a33", "#fdbb84", "#636363"]

STYLE = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.labelsize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def new_figure(width: float = 6.0, nrows: int = 1, ncols: int = 1, height: float | None = None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width, height or width * GOLDEN))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, k: int) -> np.ndarray:
    if len(y) < k or k <= 1:
        return y
    return np.convolve(y, np.ones(k) / k, mode="valid")


def plot_training_curves(steps: Sequence[Mapping], val: Sequence[Mapping], path) -> Path:
    """Loss terms, ramp-up weight and validation Dice against step."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_val) = new_figure(8.0, 1, 2, height=3.0)
        t = np.array([r["step"] for r in steps])
        k = max(1, len(t) // 50)
        for key, label in (("loss_total", "total"), ("loss_s", "supervised"),
                           ("loss_fpc", "forward"), ("loss_bpc", "backward"), ("loss_mt", "mt")):
            y = np.array([r[key] for r in steps], dtype=float)
            if not y.any():
                continue
            ys = _smooth(y, k)
            ax_loss.plot(t[len(t) - len(ys):], ys, label=label)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.legend()
        lam = ax_loss.twinx()
        lam.plot(t, [r["lam"] for r in steps], color="#636363", ls=":", label="ramp-up")
        lam.set_ylabel("ramp-up weight")
        if val:
            ax_val.plot([r["step"] for r in val], [r["val_dice"] for r in val], marker="o", ms=2)
        ax_val.set_xlabel("step")
        ax_val.set_ylabel("validation Dice")
        ax_val.set_ylim(0, 1)
        return save(fig, path)


def plot_metrics(report, path, title: str = "") -> Path:
    """Per-case Dice bars plus a boxplot of the two distance metrics."""
    with plt.rc_context(STYLE):
        fig, (ax_d, ax_s) = new_figure(8.0, 1, 2, height=3.0)
        ids = [c.id for c in report.cases]
        x = np.arange(len(ids))
        ax_d.bar(x - 0.2, report.values("dice"), 0.4, label="Dice")
        ax_d.bar(x + 0.2, report.values("jaccard"), 0.4, label="Jaccard")
        ax_d.set_xticks(x, ids, rotation=60, ha="right")
        ax_d.set_ylim(0, 1)
        ax_d.legend()
        ax_s.boxplot([report.values("hd95"), report.values("asd")])
        ax_s.set_xticks([1, 2], ["95HD", "ASD"])
        ax_s.set_ylabel("voxels")
        if title:
            fig.suptitle(title)
        return save(fig, path)


def plot_ablation(rows: Sequence[Mapping], path, key: str = "name") -> Path:
    """Mean Dice with std error bars, one bar per configuration."""
    with plt.rc_context(STYLE):
        fig, ax = new_figure(6.0)
        names = [str(r[key]) for r in rows]
        means = [100 * r["dice_mean"] for r in rows]
        stds = [100 * r["dice_std"] for r in rows]
        ax.bar(range(len(rows)), means, yerr=stds, capsize=2,
               color=[COLORS[i % len(COLORS)] for i in range(len(rows))])
        ax.set_xticks(range(len(rows)), names, rotation=30, ha="right")
        ax.set_ylabel("test Dice (%)")
        return save(fig, path)


def plot_compare(a, b, path, labels=("A", "B")) -> Path:
    """Paired per-case Dice scatter with the identity line."""
    with plt.rc_context(STYLE):
        fig, ax = new_figure(3.5, height=3.5)
        da, db = a.values("dice"), b.values("dice")
        ax.scatter(da, db, s=10)
        lo = float(min(da.min(initial=1), db.min(initial=1), 0.9)) - 0.05
        ax.plot([lo, 1], [lo, 1], color="#636363", ls="--")
        ax.set_xlabel(f"Dice {labels[0]}")
        ax.set_ylabel(f"Dice {labels[1]}")
        return save(fig, path)


def plot_volume_preview(samples: Sequence, path, n: int = 6) -> Path:
    """Middle axial slice of the first ``n`` volumes with label contours."""
    samples = list(samples)[:n]
    with plt.rc_context(STYLE):
        fig, axes = new_figure(1.6 * max(1, len(samples)), 1, max(1, len(samples)), height=1.8)
        axes = np.atleast_1d(axes)
        for ax, s in zip(axes, samples):
            z = s.image.shape[0] // 2
            ax.imshow(s.image[z], cmap="gray")
            if s.label is not None and s.label[z].any():
                ax.contour(s.label[z], levels=[0.5], colors="#e34a33", linewidths=0.6)
            ax.set_title(s.id, fontsize=7)
            ax.axis("off")
        return save(fig, path)
