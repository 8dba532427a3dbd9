"""Figures written next to the CSV artifacts (headless Agg backend)."""
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _smooth(y, w):
    if len(y) < w or w <= 1:
        return y
    c = np.cumsum(np.insert(y, 0, 0.0))
    return (c[w:] - c[:-w]) / w


def loss_figure(csv_path, png_path=None, window=25):
    """Plot every loss column of a loss.csv; returns the PNG path."""
    csv_path = Path(csv_path)
    png_path = Path(png_path) if png_path else csv_path.with_suffix(".png")
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if rows:
        it = np.array([int(r["iteration"]) for r in rows])
        for col in ("loss", "sl", "ssl"):
            if col not in rows[0]:
                continue
            y = np.array([float(r[col]) for r in rows])
            if col == "ssl" and not y.any():
                continue
            ys = _smooth(y, window)
            ax.plot(it[len(it) - len(ys):], ys, label=col, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"loss (moving mean, w={window})")
        ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return png_path


def report_figure(runs, png_path):
    """Bar chart of mean mIoU per category with population-std error bars."""
    cats = [c for c, v in runs.items() if len(v)]
    means = [100 * np.mean(runs[c]) for c in cats]
    stds = [100 * np.std(runs[c]) for c in cats]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(cats) + 2), 3.5))
    x = np.arange(len(cats))
    ax.bar(x, means, yerr=stds, capsize=4, color="#4c72b0")
    for i, c in enumerate(cats):
        ax.scatter(np.full(len(runs[c]), i), 100 * np.asarray(runs[c]), s=10, color="k", zorder=3)
    ax.set_xticks(x)
    ax.set_xticklabels(cats, rotation=20, ha="right")
    ax.set_ylabel("part mIoU (%)")
    ax.set_ylim(0, 100)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(png_path)
