"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from mpl_toolkits.mplot3d.art3d import Poly3DCollection  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width=5.0, ratio=0.62, **kw):
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, width * ratio), **kw)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(history: Sequence[dict], path) -> Path:
    fig, (ax_loss, ax_acc) = _figure(7.0, 0.4, ncols=2)
    for split in ("train", "test"):
        rows = [r for r in history if r["split"] == split]
        if not rows:
            continue
        ep = [r["epoch"] for r in rows]
        ax_loss.plot(ep, [r["loss"] for r in rows], label=split)
        ax_acc.plot(ep, [r["accuracy"] for r in rows], label=split)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(frameon=False)
    return _save(fig, path)


def plot_per_class_accuracy(acc: Sequence[float], path, names: Sequence[str] | None = None) -> Path:
    n = len(acc)
    fig, ax = _figure(max(4.0, 0.18 * n + 1.5), 0.45)
    x = np.arange(n)
    ax.bar(x, np.nan_to_num(acc), color="0.35", width=0.7)
    ax.set_xticks(x)
    ax.set_xticklabels(names if names else [str(i) for i in x], rotation=90)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("accuracy")
    return _save(fig, path)


def plot_face_count_groups(groups, path) -> Path:
    fig, ax = _figure(4.5)
    labels = [g.label for g in groups]
    x = np.arange(len(groups))
    ax.bar(x - 0.2, [g.proportion for g in groups], width=0.4, label="proportion", color="0.7")
    ax.bar(x + 0.2, [g.accuracy for g in groups], width=0.4, label="accuracy", color="0.25")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30)
    ax.set_xlabel("number of faces")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_precision_recall(recall: np.ndarray, precision: np.ndarray, path, mAP: float | None = None) -> Path:
    fig, ax = _figure(4.0, 0.8)
    ax.plot(recall, precision, marker="o", ms=3, color="k")
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if mAP is not None:
        ax.set_title(f"mAP = {mAP:.3f}")
    return _save(fig, path)


def plot_param_breakdown(parts: dict[str, int], path) -> Path:
    fig, ax = _figure(5.0, 0.55)
    names = list(parts)
    y = np.arange(len(names))
    ax.barh(y, [parts[k] / 1e6 for k in names], color="0.35")
    ax.set_yticks(y)
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlabel("parameters (M)")
    return _save(fig, path)


def render_colored_mesh(vertices: np.ndarray, faces: np.ndarray, rgb: np.ndarray, path, title: str = "") -> Path:
    """Flat-shaded 3D render of a mesh with one RGB (0-255) color per face."""
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(4, 4))
        ax = fig.add_subplot(projection="3d")
    tris = vertices[faces]
    coll = Poly3DCollection(tris, facecolors=np.asarray(rgb) / 255.0, edgecolors="none")
    ax.add_collection3d(coll)
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    c, r = (lo + hi) / 2, (hi - lo).max() / 2 or 1.0
    ax.set_xlim(c[0] - r, c[0] + r)
    ax.set_ylim(c[1] - r, c[1] + r)
    ax.set_zlim(c[2] - r, c[2] + r)
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, path)
