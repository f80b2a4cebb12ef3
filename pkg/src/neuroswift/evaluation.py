"""Reconstruction metrics, weight-contribution maps and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from . import frozen as fr
from . import numcore as nc
from .errors import ConfigurationError, DimensionError, StorageError, UndefinedMetricError

REPORT_SCHEMA_VERSION = 1
EXTRACTORS = ("pixels", "random_projection", "frozen_clip")
# correlation differences below this are rounding noise and count as ties
TIE_TOL = 1e-12
METRIC_KEYS = ("pixcorr", "ssim") + tuple(f"two_way_{e}" for e in EXTRACTORS)


def pixcorr(a, b) -> float:
    a = nc.as_tensor(a).reshape(-1)
    b = nc.as_tensor(b).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError("pixcorr needs equally sized images")
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        raise UndefinedMetricError("pixcorr undefined for a constant image")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def _gray(img):
    img = nc.as_tensor(img)
    return img.mean(axis=0) if img.ndim == 3 else img


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window=11, sigma=1.5, K1=0.01, K2=0.03, L=None) -> float:
    """Mean SSIM over valid window positions; colour images are averaged to gray first.

    ``L`` defaults to the joint value range of both images.
    """
    x, y = _gray(a), _gray(b)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ConfigurationError(f"image {x.shape} smaller than the {window}px window")
    if L is None:
        L = max(x.max(), y.max()) - min(x.min(), y.min())
        L = L if L > 0 else 1.0
    w = gaussian_window(window, sigma)

    def filt(img):
        return correlate2d(img, w, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2
    smap = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
    return float(smap.mean())


# --------------------------------------------------------------- identification


def make_extractor(name: str, world=None, seed: int = 0, dim: int = 256):
    if name == "pixels":
        return lambda imgs: nc.as_tensor(imgs).reshape(len(imgs), -1)
    if name == "random_projection":
        cache = {}

        def project(imgs):
            flat = nc.as_tensor(imgs).reshape(len(imgs), -1)
            P = cache.get(flat.shape[1])
            if P is None:
                P = cache[flat.shape[1]] = nc.RngStream(seed, "random_projection").normal(
                    (flat.shape[1], dim)) / math.sqrt(dim)
            return flat @ P

        return project
    if name == "frozen_clip":
        if world is None:
            raise ConfigurationError("frozen_clip extractor needs a world")
        return lambda imgs: fr.clip_image_encode(world.frozen, imgs).reshape(len(imgs), -1)
    raise ConfigurationError(f"unknown extractor {name!r}; expected one of {EXTRACTORS}")


def _unit_centered(X):
    X = X - X.mean(axis=1, keepdims=True)
    n = np.linalg.norm(X, axis=1, keepdims=True)
    # a constant feature vector correlates 0 with everything
    return np.divide(X, n, out=np.zeros_like(X), where=n > 0)


def _corr_matrix(A, B):
    return _unit_centered(A) @ _unit_centered(B).T


def two_way_scores(recons, gts, extractor) -> np.ndarray:
    """Per-trial fraction of distractor comparisons won (ties count half)."""
    if len(recons) != len(gts):
        raise DimensionError("recons and gts differ in trial count")
    n = len(recons)
    if n < 2:
        raise ConfigurationError("two-way identification needs at least 2 trials")
    C = _corr_matrix(extractor(recons), extractor(gts))
    own = np.diag(C)[:, None]
    tie = np.abs(own - C) <= TIE_TOL
    wins = ((own > C) & ~tie).astype(float) + 0.5 * tie
    np.fill_diagonal(wins, 0.0)
    return wins.sum(axis=1) / (n - 1)


def two_way_identification(recons, gts, extractor) -> float:
    """Percent of (trial, distractor) pairs where a reconstruction matches its own target better."""
    return float(100.0 * two_way_scores(recons, gts, extractor).mean())


# --------------------------------------------------------------- interpretability


@dataclass
class ContributionMap:
    adapter: str
    per_voxel: np.ndarray
    region_means: dict
    labels: list

    def ratio(self, numer, denom) -> float:
        """Mean contribution over the ``numer`` regions divided by that over ``denom``."""
        def pooled(names):
            vals = np.concatenate([self.per_voxel[[i for i, l in enumerate(self.labels) if l == n]]
                                   for n in names])
            return vals.mean()
        return float(pooled(numer) / pooled(denom))


def contribution_map(adapter, mask) -> ContributionMap:
    """L2 norm of each voxel's outgoing weights in the voxel-facing linear layer."""
    W = adapter.params["fc_in"].tensors["W"]  # (voxels, hidden); row j feeds from voxel j
    if W.shape[0] != mask.total_voxels:
        raise DimensionError(f"fc_in width {W.shape[0]} != mask {mask.total_voxels}")
    per_voxel = np.linalg.norm(W, axis=1)
    means = {name: float(per_voxel[ix].mean()) for name, ix in mask.regions}
    return ContributionMap(adapter.kind, per_voxel, means, mask.labels())


def write_contributions_csv(cmap: ContributionMap, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel_index", "region", "contribution"])
        for i, (lab, c) in enumerate(zip(cmap.labels, cmap.per_voxel)):
            w.writerow([i, lab, repr(float(c))])


# ---------------------------------------------------------------------- reports


@dataclass
class MetricReport:
    metrics: dict
    n_trials: int
    config: dict = field(default_factory=dict)
    per_trial: list = field(default_factory=list)

    def __post_init__(self):
        for key in METRIC_KEYS:
            self.metrics.setdefault(key, None)


def evaluate_images(recons, gts, extractors=EXTRACTORS, world=None, seed=0, dim=256,
                    trial_ids=None, config=None) -> MetricReport:
    recons, gts = nc.as_tensor(recons), nc.as_tensor(gts)
    n = len(gts)
    trial_ids = list(range(n)) if trial_ids is None else [int(t) for t in trial_ids]
    rows = [{"trial": t, "pixcorr": pixcorr(r, g), "ssim": ssim(r, g)}
            for t, r, g in zip(trial_ids, recons, gts)]
    metrics = {"pixcorr": float(np.mean([r["pixcorr"] for r in rows])),
               "ssim": float(np.mean([r["ssim"] for r in rows]))}
    for name in extractors:
        scores = two_way_scores(recons, gts, make_extractor(name, world, seed, dim))
        metrics[f"two_way_{name}"] = float(100.0 * scores.mean())
        for row, s in zip(rows, scores):
            row[f"two_way_{name}"] = float(100.0 * s)
    return MetricReport(metrics, n, dict(config or {}), rows)


def _sig6(x):
    return None if x is None else float(f"{x:.6g}")


def write_report(report: MetricReport, path) -> Path:
    path = Path(path)
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_trials": report.n_trials,
        "metrics": {k: _sig6(report.metrics.get(k)) for k in sorted(report.metrics)},
        "config": report.config,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        cols = ["trial"] + [k for k in METRIC_KEYS if any(k in r for r in report.per_trial)]
        with open(path.with_name("per_trial.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in report.per_trial:
                w.writerow([r.get(c, "") if c == "trial" else
                            ("" if r.get(c) is None else f"{r[c]:.6g}") for c in cols])
    except OSError as exc:
        raise StorageError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report(path) -> MetricReport:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise StorageError(f"cannot read report {path}: {exc}") from exc
    rows = []
    csv_path = Path(path).with_name("per_trial.csv")
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({k: (int(v) if k == "trial" else (float(v) if v != "" else None))
                             for k, v in r.items()})
    return MetricReport(doc["metrics"], doc["n_trials"], doc.get("config", {}), rows)
