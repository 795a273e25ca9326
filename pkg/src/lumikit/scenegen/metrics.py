"""Image / material / lighting metrics."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch

from ..losses import ssim
from ..shading import texel_to_dir
from .envmaps import dominant_texel

PSNR_CAP = 99.0


def mse(pred, gt, mask: Optional[np.ndarray] = None) -> float:
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    err = (pred - gt) ** 2
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, bool).reshape(mask.shape[:2] + (1,) * (err.ndim - 2)), err.shape)
        return float(err[m].mean()) if m.any() else 0.0
    return float(err.mean())


def psnr(pred, gt, mask=None, peak: float = 1.0) -> float:
    m = mse(pred, gt, mask)
    if m <= 0:
        return PSNR_CAP
    return float(min(10 * math.log10(peak * peak / m), PSNR_CAP))


def ssim_metric(pred, gt) -> float:
    a = torch.as_tensor(np.asarray(pred, np.float64))
    b = torch.as_tensor(np.asarray(gt, np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    return float(ssim(a, b))


def channel_scale(pred, gt, mask) -> np.ndarray:
    """Least-squares per-channel scale s minimising |s * pred - gt|^2 on mask."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    m = np.asarray(mask, bool)
    p, g = pred[m], gt[m]
    den = (p * p).sum(0)
    return np.where(den > 0, (p * g).sum(0) / np.maximum(den, 1e-12), 1.0)


def angular_error_deg(env_pred, env_gt) -> float:
    h, w = np.asarray(env_gt).shape[:2]
    a = texel_to_dir(*dominant_texel(env_pred), w, h)
    b = texel_to_dir(*dominant_texel(env_gt), w, h)
    return float(np.degrees(np.arccos(np.clip(a @ b, -1, 1))))


def texel_distance(env_pred, env_gt) -> int:
    """Chebyshev distance between argmax texels, azimuth wrapping around."""
    (r1, c1), (r2, c2) = dominant_texel(env_pred), dominant_texel(env_gt)
    w = np.asarray(env_gt).shape[1]
    dc = abs(c1 - c2)
    return int(max(abs(r1 - r2), min(dc, w - dc)))


def eval_metrics(pred, gt, kind: str = "image", mask=None) -> dict:
    """PSNR / SSIM / MSE record; albedo adds scale-aligned variants, envmap
    adds the dominant-light angular error."""
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if kind not in ("image", "relight", "albedo", "roughness", "envmap"):
        raise ValueError(f"unknown metric kind {kind!r}")
    if mask is not None:
        keep = np.asarray(mask, bool)[..., None] if pred.ndim == 3 else np.asarray(mask, bool)
        pred_m, gt_m = np.where(keep, pred, 0), np.where(keep, gt, 0)
    else:
        pred_m, gt_m = pred, gt
    rec = {"psnr": psnr(pred_m, gt_m, mask), "ssim": ssim_metric(pred_m, gt_m), "mse": mse(pred_m, gt_m, mask)}
    if kind == "albedo":
        m = np.ones(pred.shape[:2], bool) if mask is None else np.asarray(mask, bool)
        s = channel_scale(pred, gt, m)
        aligned = np.where(m[..., None], pred * s, 0)
        gt_a = np.where(m[..., None], gt, 0)
        rec.update({"scale": s.tolist(), "psnr_aligned": psnr(aligned, gt_a, mask),
                    "ssim_aligned": ssim_metric(aligned, gt_a), "mse_aligned": mse(aligned, gt_a, mask)})
    if kind == "envmap":
        rec["angular_error_deg"] = angular_error_deg(pred, gt)
        rec["texel_distance"] = texel_distance(pred, gt)
    return rec
