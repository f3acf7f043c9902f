"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
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


def plot_loss_curves(loss_csv, path) -> Path:
    with open(loss_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        if rows:
            step = np.array([int(r["iteration"]) for r in rows])
            for key in ("L_GAN_G", "L_GAN_D", "L_L1", "L_SSIM", "L_TV", "L_CL"):
                values = np.array([float(r[key]) for r in rows])
                if np.any(values):
                    ax.plot(step, values, lw=0.8, label=key)
            ax.set_yscale("log")
            ax.legend(ncol=3, frameon=False)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        return _save(fig, path)


def plot_metric_table(table, path, metric: str = "psnr") -> Path:
    """Grouped bars: one panel per dataset, experiments on x, one bar per sample count."""
    datasets = table.datasets
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(1, len(datasets)), figsize=(4.0 * max(1, len(datasets)), 3.2),
                                 squeeze=False)
        for ax, ds in zip(axes[0], datasets):
            n_groups = len(table.n_samples)
            width = 0.8 / max(1, n_groups)
            for g, ns in enumerate(table.n_samples):
                xs, ys = [], []
                for e, exp in enumerate(table.experiments):
                    cell = table.cell(ds, exp, ns)
                    if cell is not None and np.isfinite(cell[metric]):
                        xs.append(e + (g - (n_groups - 1) / 2) * width)
                        ys.append(cell[metric])
                ax.bar(xs, ys, width=width, label=f"ns={ns}")
            ax.set_xticks(range(len(table.experiments)))
            ax.set_xticklabels(table.experiments, rotation=30, ha="right")
            ax.set_title(ds)
            ax.set_ylabel(metric.upper())
            finite = [c[metric] for c in table.cells.values() if np.isfinite(c[metric])]
            if finite and metric == "psnr":
                ax.set_ylim(min(finite) - 1.0, max(finite) + 0.5)
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_crop_panel(noisy, denoised, gt, path, titles=("noisy", "denoised", "ground truth")) -> Path:
    images = [np.asarray(a, dtype=float) for a in (noisy, denoised, gt)]
    lo = min(a.min() for a in images)
    hi = max(a.max() for a in images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
        for ax, img, title in zip(axes, images, titles):
            ax.imshow(img, cmap="gray", vmin=lo, vmax=hi)
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)
