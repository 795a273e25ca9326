"""Training objectives for both stages. Every loss is a differentiable torch
scalar; gradients come from autograd and are checked against finite
differences in the test suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import torch
import torch.nn.functional as F

LAMBDA_SSIM = 0.2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
OPACITY_EPS = 1e-6


@dataclass
class Stage1Weights:
    normal: float = 0.002
    distortion: float = 1000.0
    opacity: float = 0.1
    separation: float = 0.001
    delta_c: float = 0.01
    delta_mu: float = 0.001
    separation_start_iter: int = 1000
    deform_warmup_iter: int = 200

    def __post_init__(self):
        for name in ("normal", "distortion", "opacity", "separation", "delta_c", "delta_mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be nonnegative")


@dataclass
class Stage2Weights:
    env: float = 1e-3
    pixels: int = 8
    rays: int = 256

    def __post_init__(self):
        if self.env < 0 or self.pixels < 0 or self.rays < 0:
            raise ValueError("stage-2 weights must be nonnegative")


@lru_cache(maxsize=8)
def _gauss_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM of (H, W, C) images, Gaussian window, zero padding."""
    c = img1.shape[-1]
    win = _gauss_window(SSIM_WINDOW, SSIM_SIGMA, img1.dtype)[None, None].expand(c, 1, -1, -1)
    a = img1.permute(2, 0, 1)[None]
    b = img2.permute(2, 0, 1)[None]
    pad = SSIM_WINDOW // 2

    def filt(x):
        return F.conv2d(x, win, padding=pad, groups=c)

    mu1, mu2 = filt(a), filt(b)
    s11 = filt(a * a) - mu1 * mu1
    s22 = filt(b * b) - mu2 * mu2
    s12 = filt(a * b) - mu1 * mu2
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    m = ((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / ((mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2))
    return m[0].permute(1, 2, 0)


def ssim(img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
    return ssim_map(img1, img2).mean()


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_shapes(a, b)
    return (a - b).abs().mean()


def loss_reconstruction(render: torch.Tensor, gt: torch.Tensor, lambda_ssim: float = LAMBDA_SSIM):
    """(1 - l) L1 + l (1 - SSIM)."""
    _check_shapes(render, gt)
    return (1 - lambda_ssim) * loss_l1(render, gt) + lambda_ssim * (1 - ssim(render, gt))


def normal_consistency(opacity, normal_raw, depth_normal, valid, threshold: float = 0.5):
    """mean over foreground of sum_i w_i (1 - n_i . N) = O - (sum_i w_i n_i) . N."""
    fg = valid & (opacity[..., 0].detach() > threshold)
    per_px = opacity[..., 0] - (normal_raw * depth_normal).sum(-1)
    count = fg.sum()
    if count == 0:
        return per_px.sum() * 0
    return (per_px * fg).sum() / count


def loss_normal_consistency(gb, cam, threshold: float = 0.5):
    from .splat import depth_to_normal

    depth = gb.depth / gb.opacity.clamp_min(1e-6)
    dn, valid = depth_to_normal(depth, cam)
    return normal_consistency(gb.opacity, gb.normal_raw, dn, valid, threshold)


def segment_sorted(ray: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
    """Permutation sorting pairs by (ray, key)."""
    perm = torch.argsort(key, stable=True)
    return perm[torch.argsort(ray[perm], stable=True)]


def _exclusive_segment_cumsum(x: torch.Tensor, ray: torch.Tensor) -> torch.Tensor:
    k = x.shape[0]
    xd = x.double()
    excl = torch.cumsum(xd, 0) - xd
    if k:
        first = torch.ones(k, dtype=torch.bool)
        first[1:] = ray[1:] != ray[:-1]
        start = torch.cummax(torch.where(first, torch.arange(k), torch.zeros(k, dtype=torch.long)), 0).values
        excl = excl - excl[start]
    return excl.to(x.dtype)


def loss_depth_distortion(ray: torch.Tensor, z: torch.Tensor, w: torch.Tensor, num_rays: int):
    """mean over rays of sum_{i,j} w_i w_j |z_i - z_j| in O(k log k) per ray.

    With hits sorted by depth the double sum equals
    2 sum_i w_i (z_i W_{<i} - (wz)_{<i}).
    """
    if num_rays == 0:
        return z.sum() * 0
    perm = segment_sorted(ray, z.detach())
    r, zz, ww = ray[perm], z[perm], w[perm]
    w_before = _exclusive_segment_cumsum(ww, r)
    wz_before = _exclusive_segment_cumsum(ww * zz, r)
    per_hit = 2 * ww * (zz * w_before - wz_before)
    return per_hit.sum() / num_rays


def ndc_depth(z: torch.Tensor, near: float = 0.01, far: float = 100.0) -> torch.Tensor:
    """Depth remapped to [0, 1) the way the distortion weight expects."""
    return far / (far - near) * (1.0 - near / z.clamp_min(near))


def loss_opacity_mask(opacity: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy between accumulated opacity and the foreground mask."""
    _check_shapes(opacity, mask)
    o = opacity.clamp(OPACITY_EPS, 1 - OPACITY_EPS)
    return (-mask * torch.log(o) - (1 - mask) * torch.log1p(-o)).mean()


def loss_separation(logits: torch.Tensor) -> torch.Tensor:
    if logits.numel() == 0:
        return logits.sum()
    return logits.abs().mean()


def loss_delta_reg(dc: torch.Tensor, dmu: torch.Tensor):
    n = dc.shape[0]
    if n == 0:
        return dc.sum(), dmu.sum()
    return (dc * dc).sum() / n, (dmu * dmu).sum() / n


STAGE1_TERMS = ("recon", "normal", "distortion", "opacity", "separation", "delta_c", "delta_mu")


def total_stage1(terms: dict, weights: Stage1Weights, iteration: int = 10 ** 9):
    """Weighted sum; the separation weight only applies from
    ``separation_start_iter`` on."""
    lam_p = weights.separation if iteration >= weights.separation_start_iter else 0.0
    lams = {
        "recon": 1.0, "normal": weights.normal, "distortion": weights.distortion,
        "opacity": weights.opacity, "separation": lam_p,
        "delta_c": weights.delta_c, "delta_mu": weights.delta_mu,
    }
    total = 0.0
    for k, lam in lams.items():
        if k in terms and lam != 0:
            total = total + lam * terms[k]
    return total


def env_lower_penalty(env: torch.Tensor) -> torch.Tensor:
    """Sum of squared radiance over texels whose centre points below the horizon."""
    from .shading import lower_hemisphere_mask

    h, w = env.shape[:2]
    mask = torch.as_tensor(lower_hemisphere_mask(w, h))
    return (env[mask] ** 2).sum()


def total_stage2(gs_render, gt, pbr_pixels, gt_pixels, env, weights: Stage2Weights):
    """L_c(splat render, gt) + L1(pbr, gt pixels) + lambda_env * lower-sky L2.

    Returns ``(total, terms)``.
    """
    terms = {
        "recon": loss_reconstruction(gs_render, gt),
        "pbr_l1": loss_l1(pbr_pixels, gt_pixels) if pbr_pixels.numel() else pbr_pixels.sum(),
        "env_reg": env_lower_penalty(env),
    }
    total = terms["recon"] + terms["pbr_l1"] + weights.env * terms["env_reg"]
    return total, terms
