"""Training losses with analytic gradients w.r.t. the prediction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DimensionError, NormalizationError


@dataclass
class LossValue:
    scalar: float
    terms: dict = field(default_factory=dict)
    # diagnostics that are not part of the sum (e.g. the raw squared-error total)
    extra: dict = field(default_factory=dict)


def mse_loss(pred, target):
    """Mean squared error over batch and elements; returns (LossValue, d/dpred)."""
    pred, target = nc.as_tensor(pred), nc.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: pred{pred.shape} vs target{target.shape}")
    diff = pred - target
    total = float(np.sum(diff * diff))
    value = total / diff.size
    return LossValue(value, {"mse": value}, {"mse_sum": total}), 2.0 * diff / diff.size


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NormalizationError("cannot L2-normalize a zero embedding row")
    return x / norms, norms


def softclip_loss(p, t, temp: float = 0.1, normalize: bool = True):
    """Contrastive loss with soft targets from the target-target similarities.

    Rows are trials. Summed (not averaged) over the batch. Returns
    ``(LossValue, d/dp)``; ``t`` is treated as a constant.
    """
    if temp <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temp}")
    p, t = nc.as_tensor(p), nc.as_tensor(t)
    if p.ndim != 2 or p.shape != t.shape:
        raise DimensionError(f"softclip: p{p.shape} vs t{t.shape}")
    if normalize:
        pn, p_norm = _unit_rows(p)
        tn, _ = _unit_rows(t)
    else:
        pn, tn = p, t
    soft = nc.softmax(tn @ tn.T / temp, axis=1)
    logits = pn @ tn.T / temp
    logq = nc.log_softmax(logits, axis=1)
    value = float(-np.sum(soft * logq))
    dlogits = np.exp(logq) - soft
    dpn = dlogits @ tn / temp
    if normalize:
        dp = (dpn - pn * np.sum(pn * dpn, axis=1, keepdims=True)) / p_norm
    else:
        dp = dpn
    return LossValue(value, {"softclip": value}), dp


def _clip_loss(pred, target, temp, normalize):
    pred, target = nc.as_tensor(pred), nc.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"clip loss: pred{pred.shape} vs target{target.shape}")
    n = pred.shape[0]
    sc, g_sc = softclip_loss(pred.reshape(n, -1), target.reshape(n, -1), temp, normalize)
    ms, g_ms = mse_loss(pred, target)
    value = sc.scalar + ms.scalar
    loss = LossValue(value, {"softclip": sc.scalar, "mse": ms.scalar}, ms.extra)
    return loss, g_sc.reshape(pred.shape) + g_ms


def clip_image_loss(e_img_pred, e_img_clip, temp: float = 0.1, normalize: bool = True):
    return _clip_loss(e_img_pred, e_img_clip, temp, normalize)


def clip_text_loss(e_txt_pred, e_txt_clip, temp: float = 0.1, normalize: bool = True):
    return _clip_loss(e_txt_pred, e_txt_clip, temp, normalize)
