"""Figures for the CLI: pose overlays and PCP bar charts, rendered off-screen."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from . import layout  # noqa: E402

SUBTREE_COLORS = {"left_arm": "#d62728", "right_arm": "#1f77b4", "left_leg": "#ff7f0e",
                  "right_leg": "#2ca02c"}
TORSO_COLOR = "#9467bd"


def _part_color(name: str) -> str:
    for st in layout.SUBTREES:
        if name in st.part_names:
            return SUBTREE_COLORS.get(st.name, TORSO_COLOR)
    return TORSO_COLOR


def draw_pose(ax, points: np.ndarray, boxes=None, truth: np.ndarray | None = None, label: str | None = None):
    """Skeleton lines and part boxes on an existing axes. ``boxes`` maps part name to Box."""
    if truth is not None:
        for a, b in layout.SKELETON:
            pa, pb = truth[layout.PART_INDEX[a]], truth[layout.PART_INDEX[b]]
            ax.plot([pa[0], pb[0]], [pa[1], pb[1]], color="white", lw=1.0, alpha=0.6, ls="--")
    for a, b in layout.SKELETON:
        pa, pb = points[layout.PART_INDEX[a]], points[layout.PART_INDEX[b]]
        ax.plot([pa[0], pb[0]], [pa[1], pb[1]], color=_part_color(b), lw=1.5)
    for name, box in (boxes or {}).items():
        ax.add_patch(Rectangle((box.x_min, box.y_min), box.x_max - box.x_min, box.y_max - box.y_min,
                               fill=False, lw=0.7, ec=_part_color(name)))
    if label:
        ax.set_title(label, fontsize=8)


def save_overlay(path: str | Path, image: np.ndarray, estimate=None, truth: np.ndarray | None = None,
                 title: str | None = None, dpi: int = 100) -> Path:
    """Image with the estimate's skeleton and part boxes; a bare image when ``estimate`` is None."""
    h, w = image.shape[:2]
    fig = plt.figure(figsize=(w / dpi * 3, h / dpi * 3), dpi=dpi)
    ax = fig.add_axes((0, 0, 1, 1))
    ax.imshow(image, cmap="gray", interpolation="nearest")
    if estimate is not None:
        draw_pose(ax, estimate.points(), {n: p.box for n, p in estimate.parts.items()}, truth)
    if title:
        ax.text(2, 2, title, color="yellow", fontsize=7, va="top")
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.axis("off")
    path = Path(path)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path


def save_pcp_chart(path: str | Path, reports, title: str = "PCP by limb") -> Path:
    """Grouped bars, one group per limb column plus Total, one bar per report."""
    cols = list(reports[0].counts) + ["Total"]
    x = np.arange(len(cols))
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, rep in enumerate(reports):
        row = rep.row()
        ax.bar(x + (i - (len(reports) - 1) / 2) * width, [row[c] for c in cols], width,
               label=rep.label or f"model {i}")
    ax.set_xticks(x)
    ax.set_xticklabels(cols)
    ax.set_ylabel("PCP (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_objective_plot(path: str | Path, rows) -> Path:
    """Objective per SVM epoch, one line per training stage. ``rows`` are TrainLog rows."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    stages: dict[str, list[float]] = {}
    for stage, _, _, obj, _, _ in rows:
        stages.setdefault(stage.split(":")[0] if stage.startswith("sub") else stage, []).append(obj)
    for stage, vals in stages.items():
        ax.plot(np.arange(len(vals)), vals, label=stage, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("objective")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
