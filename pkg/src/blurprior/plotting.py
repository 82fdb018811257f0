"""Figure helpers for reports: pattern histograms, cross matrices, metric bars, loss curves.

Everything renders through the Agg backend straight to PNG files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _style(ax, xlabel=None, ylabel=None, title=None):
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    if xlabel:
        ax.set_xlabel(xlabel)
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pattern_histogram(hist, path, title: str | None = None) -> Path:
    """Orientation and magnitude histograms side by side; locality index in the title."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    centers, counts = zip(*hist.angle_bins)
    a1.bar(centers, counts, width=9.0, color="#4477aa")
    a1.set_xticks(range(0, 180, 30))
    _style(a1, "direction (deg, mod 180)", "samples")
    centers, counts = zip(*hist.magnitude_bins)
    a2.bar(centers, counts, width=0.9, color="#cc6677")
    _style(a2, "magnitude (px)", "samples")
    fig.suptitle((title + "  " if title else "") + f"locality {hist.locality_index:.2f}", fontsize=10)
    return _save(fig, path)


def plot_cross_matrix(matrix, path, title: str | None = None) -> Path:
    """PSNR heatmap, one cell per (train, test) pair; diagonal cells outlined."""
    vals = np.array([[matrix.cells[(r, c)][0] for c in matrix.cols] for r in matrix.rows])
    fig, ax = plt.subplots(figsize=(1.2 * len(matrix.cols) + 2.5, 0.9 * len(matrix.rows) + 1.5))
    im = ax.imshow(vals, cmap="viridis")
    ax.set_xticks(range(len(matrix.cols)), matrix.cols)
    ax.set_yticks(range(len(matrix.rows)), matrix.rows)
    for i, r in enumerate(matrix.rows):
        for j, c in enumerate(matrix.cols):
            ax.text(j, i, f"{vals[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
            if r == c:
                ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, ec="r", lw=1.5))
    ax.set_xlabel("test")
    ax.set_ylabel("train")
    if title:
        ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, label="PSNR (dB)")
    return _save(fig, path)


def plot_metric_bars(values: dict[str, float], path, ylabel: str = "PSNR (dB)",
                     title: str | None = None, baseline: float | None = None) -> Path:
    """One bar per named result; optional dashed baseline (e.g. blurred-input PSNR)."""
    fig, ax = plt.subplots(figsize=(max(3.0, 0.8 * len(values) + 1.5), 3))
    names = list(values)
    ax.bar(range(len(names)), [values[n] for n in names], color="#228833")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    if baseline is not None:
        ax.axhline(baseline, ls="--", c="k", lw=1)
    lo = min(list(values.values()) + ([baseline] if baseline is not None else []))
    ax.set_ylim(bottom=max(0.0, lo - 2.0))
    _style(ax, None, ylabel, title)
    return _save(fig, path)


def plot_loss_curve(losses, path, window: int = 50, title: str | None = None) -> Path:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, lw=0.6, alpha=0.5, c="#888888")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, len(losses)), smooth, c="#4477aa")
    ax.set_yscale("log")
    _style(ax, "iteration", "total loss", title)
    return _save(fig, path)
