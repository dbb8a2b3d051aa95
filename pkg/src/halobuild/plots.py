"""File-only matplotlib figures: KDE curves, training curves and error-map panels."""
from __future__ import annotations

import os
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .degrade import DensityCurve  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}

_KDE_COLORS = {"clear": "#1f77b4", "haze": "#d62728", "lowlight": "#2ca02c"}


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def kde_figure(curves: Dict[str, DensityCurve], path: str) -> str:
    """Overlay density curves; the mode of each is marked with a dotted line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for label, c in curves.items():
            color = _KDE_COLORS.get(label)
            ax.plot(c.centers, c.density, label=f"{label} (mode {c.mode:.3f})", color=color, lw=1.4)
            ax.axvline(c.mode, color=color, ls=":", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(bottom=0)
        ax.set_xlabel("grayscale intensity")
        ax.set_ylabel("density")
        ax.legend(loc="upper right")
        return _save(fig, path)


def training_figure(rows: Sequence[tuple], path: str) -> str:
    """``rows`` as returned by ``read_metrics_log``: (epoch, loss, iou, f1, precision, recall)."""
    if not rows:
        raise ValueError("no metrics rows to plot")
    arr = np.asarray(rows, dtype=float)
    with plt.rc_context(STYLE):
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(7.5, 2.8))
        a0.plot(arr[:, 0], arr[:, 1], color="k", lw=1.2)
        a0.set_xlabel("epoch")
        a0.set_ylabel("training loss")
        for col, name in zip(range(2, 6), ("IoU", "F1", "precision", "recall")):
            a1.plot(arr[:, 0], arr[:, col], lw=1.2, label=name)
        a1.set_xlabel("epoch")
        a1.set_ylabel("validation")
        a1.set_ylim(0, 1)
        a1.legend(loc="lower right", ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def errormap_panel(image: np.ndarray, gt: np.ndarray, emap: np.ndarray, path: str, title: str = "") -> str:
    """Side-by-side image, ground truth and colored error map (white TP, red FP, blue FN)."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.0, 2.5))
        for ax, data, name in zip(axes, (np.clip(img, 0, 1), gt, emap), ("image", "ground truth", "errors")):
            ax.imshow(data, cmap="gray" if data.ndim == 2 else None, interpolation="nearest")
            ax.set_title(name)
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        return _save(fig, path)
