"""Figures written straight to files (Agg canvas, no pyplot state)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .dataio import REGIONS
from .errors import StorageError

MODE_LABELS = {"full": "full", "only_z": "only z", "no_text": "w/o text",
               "no_image": "w/o image", "no_z": "w/o z"}


def _save(fig, path):
    FigureCanvasAgg(fig)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise StorageError(f"cannot write figure {path}: {exc}") from exc
    return Path(path)


def _rgb(img, lo=-1.0, hi=1.0):
    img = np.asarray(img)
    img = img if img.shape[0] == 3 else np.repeat(img[:1], 3, axis=0)
    return np.clip((img.transpose(1, 2, 0) - lo) / (hi - lo), 0, 1)


def loss_curves(history: dict, path):
    """One panel per adapter: train and val loss by epoch (log scale)."""
    kinds = [k for k in history if history[k]]
    fig = Figure(figsize=(4 * max(1, len(kinds)), 3))
    for i, kind in enumerate(kinds):
        ax = fig.add_subplot(1, len(kinds), i + 1)
        rows = history[kind]
        ep = [r["epoch"] for r in rows]
        for split in ("train", "val"):
            vals = [r.get(split) for r in rows]
            if any(v is not None for v in vals):
                ax.plot(ep, vals, label=split)
        ax.set_yscale("log")
        ax.set_title(kind)
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def recon_grid(gts, recons_by_mode: dict, path, n: int = 6):
    """Rows: ground truth then one row per mode; columns: the first ``n`` trials."""
    n = min(n, len(gts))
    rows = [("stimulus", gts)] + [(MODE_LABELS.get(m, m), r) for m, r in recons_by_mode.items()]
    fig = Figure(figsize=(1.2 * n + 1, 1.2 * len(rows)))
    for r, (label, imgs) in enumerate(rows):
        for c in range(n):
            ax = fig.add_subplot(len(rows), n, r * n + c + 1)
            ax.imshow(_rgb(imgs[c]), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(label, fontsize=8)
    return _save(fig, path)


def contribution_bars(maps: dict, path):
    """Per-region mean voxel contribution for each adapter, normalised to its own maximum."""
    fig = Figure(figsize=(6, 3))
    ax = fig.add_subplot(1, 1, 1)
    x = np.arange(len(REGIONS))
    width = 0.8 / max(1, len(maps))
    for i, (kind, cmap) in enumerate(maps.items()):
        vals = np.array([cmap.region_means.get(r, np.nan) for r in REGIONS])
        ax.bar(x + i * width, vals / np.nanmax(vals), width, label=kind)
    ax.set_xticks(x + width * (len(maps) - 1) / 2)
    ax.set_xticklabels(REGIONS, rotation=30, ha="right")
    ax.set_ylabel("relative contribution")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def ablation_bars(rows, path, metrics=("ssim", "pixcorr", "two_way_frozen_clip")):
    """Metric per mode, one panel per metric, bars grouped by subject."""
    subjects = list(dict.fromkeys(r["subject"] for r in rows))
    modes = list(dict.fromkeys(r["mode"] for r in rows))
    vals = {(r["subject"], r["mode"], r["metric"]): r["value"] for r in rows}
    fig = Figure(figsize=(4 * len(metrics), 3))
    x = np.arange(len(modes))
    width = 0.8 / max(1, len(subjects))
    for i, metric in enumerate(metrics):
        ax = fig.add_subplot(1, len(metrics), i + 1)
        for j, subj in enumerate(subjects):
            ys = [vals.get((subj, m, metric)) for m in modes]
            ys = [np.nan if y is None else y for y in ys]
            ax.bar(x + j * width, ys, width, label=subj)
        ax.set_xticks(x + width * (len(subjects) - 1) / 2)
        ax.set_xticklabels([MODE_LABELS.get(m, m) for m in modes], rotation=30, ha="right")
        ax.set_title(metric)
    fig.axes[0].legend(frameon=False, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
