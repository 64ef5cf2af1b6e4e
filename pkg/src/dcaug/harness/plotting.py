"""Matplotlib renderings of the report tables. Headless (Agg) only."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dcaug import augment  # noqa: E402
from dcaug.augment import AppliedTransform, SearchSpace, TransformOp  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def rejection_plot(rows: Sequence[dict], path) -> Path:
    """Wider-kept ratio over training, one line per (run label, domain)."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    keys = sorted({(r["label"], r["domain_name"]) for r in rows})
    for label, dom in keys:
        pts = sorted((r["epoch"], r["ratio"]) for r in rows if r["label"] == label and r["domain_name"] == dom)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=f"{label} / {dom}")
    ax.set_xlabel("training window")
    ax.set_ylabel("wider kept (ratio)")
    ax.set_ylim(-0.02, 1.02)
    if keys:
        ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)


def scatter_plot(points: Sequence[dict], path) -> Path:
    """Consistency (x) against diversity (y), one colour per tag."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for tag in sorted({p["tag"] for p in points}):
        sel = [p for p in points if p["tag"] == tag]
        ax.scatter([p["consistency"] for p in sel], [p["diversity"] for p in sel], s=18, label=tag)
    ax.set_xlabel("consistency (augmented - clean accuracy)")
    ax.set_ylabel("diversity (late training loss)")
    if points:
        ax.legend(fontsize=7)
    return _save(fig, path)


def lambda_plot(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for method in sorted({r["method"] for r in rows}):
        sel = sorted((r["lambda"], r["ood_mean"], r["ood_std"]) for r in rows if r["method"] == method)
        ax.errorbar([s[0] for s in sel], [s[1] for s in sel], yerr=[s[2] for s in sel], marker="o", capsize=3, label=method)
    ax.set_xlabel("lambda")
    ax.set_ylabel("held-out accuracy")
    if rows:
        ax.legend(fontsize=7)
    return _save(fig, path)


def accuracy_plot(rows: Sequence[dict], path) -> Path:
    """Source-validation against held-out accuracy per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["in_domain_mean"] for r in rows], 0.4, label="source validation")
    ax.bar(x + 0.2, [r["ood_mean"] for r in rows], 0.4, yerr=[r["ood_std"] for r in rows], capsize=3, label="held-out")
    ax.set_xticks(x, [r["label"] for r in rows], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    return _save(fig, path)


def image_grid(cells: Sequence[Sequence[np.ndarray]], path, row_labels=None, col_labels=None, title=None) -> Path:
    rows, cols = len(cells), max(len(r) for r in cells)
    fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols + 1.2, 1.1 * rows + 0.4), squeeze=False)
    for i in range(rows):
        for j in range(cols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(cells[i]):
                ax.imshow(cells[i][j], interpolation="nearest")
            else:
                ax.axis("off")
            if col_labels is not None and i == 0 and j < len(col_labels):
                ax.set_title(col_labels[j], fontsize=7)
            if row_labels is not None and j == 0:
                ax.set_ylabel(row_labels[i], fontsize=6, rotation=0, ha="right", va="center")
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def magnitude_at(space: SearchSpace, op: TransformOp, q: float):
    """Magnitude at quantile ``q`` of the op's range (None if parameterless)."""
    rng = augment.get_range(space, op)
    if rng is None:
        return None
    lo, hi = rng
    m = lo + q * (hi - lo)
    return int(round(m)) if op in augment.INTEGER_OPS else float(m)


def transform_grid(
    img: np.ndarray,
    spaces: Sequence[SearchSpace],
    path,
    quantiles: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
) -> Path:
    """Every op at evenly spaced points of its range, one row per (op, space)."""
    cells, labels = [], []
    for op in augment.OPS:
        for space in spaces:
            row = []
            for q in quantiles:
                m = magnitude_at(space, op, q)
                row.append(augment.apply(AppliedTransform(op, m), img))
            cells.append(row)
            labels.append(f"{op.value} ({space.variant.value})")
    return image_grid(cells, path, labels, [f"q={q:g}" for q in quantiles])
