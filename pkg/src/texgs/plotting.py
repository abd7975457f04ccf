"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss(history: list, path, window: int = 20):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        stages = sorted({r["stage"] for r in history})
        offset = 0
        for s in stages:
            loss = np.array([r["loss"] for r in history if r["stage"] == s])
            x = offset + np.arange(1, len(loss) + 1)
            ax.plot(x, loss, lw=0.5, alpha=0.35, color=f"C{s - 1}", label=f"stage {s}")
            if len(loss) >= window:
                smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
                ax.plot(x[window - 1:], smooth, lw=1.4, color=f"C{s - 1}")
            offset += len(loss)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        if stages:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_rank_histogram(edges, counts, path, band=(1.9, 2.1)):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="C0", edgecolor="white", lw=0.5)
        ax.axvspan(*band, color="C3", alpha=0.15, lw=0)
        ax.set_xlim(edges[0], edges[-1])
        ax.set_xlabel("effective rank")
        ax.set_ylabel("Gaussians")
        return _save(fig, path)


def plot_decomposition(full, base, tex, path, gt=None):
    panels = [("render", full), ("base", base), ("texture", tex)]
    if gt is not None:
        panels.insert(0, ("ground truth", gt))
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4))
        for ax, (title, img) in zip(np.atleast_1d(axes), panels):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_title(title)
            ax.set_axis_off()
        return _save(fig, path)


def plot_metrics(names, values, path, ylabel="PSNR [dB]"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.35 * len(names) + 1.5), 3.0))
        ax.bar(np.arange(len(values)), values, color="C2")
        ax.set_xticks(np.arange(len(values)))
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel(ylabel)
        return _save(fig, path)
