"""Physically based deferred shading of splat G-buffers.

Lat-long environment maps, a GGX / Schlick / height-correlated Smith BRDF with
a Lambertian diffuse lobe, stratified uniform hemisphere Monte Carlo, and
visibility / indirect radiance obtained by tracing rays through the splats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .geometry import Rng, orthonormal_basis
from .splat import DEFAULT_SETTINGS, GBuffer, RenderSettings, trace

F0_DIELECTRIC = 0.04
ENV_WIDTH, ENV_HEIGHT = 32, 16


# ---------------------------------------------------------------------------
# Environment map
# ---------------------------------------------------------------------------

def dir_to_texel(dirs, width: int, height: int):
    """Equirectangular texel of unit directions: row from the polar angle
    (row 0 holds +z), column from atan2(y, x) wrapped to [0, 2pi)."""
    if isinstance(dirs, torch.Tensor):
        z = dirs[..., 2].clamp(-1.0, 1.0)
        theta = torch.acos(z)
        phi = torch.remainder(torch.atan2(dirs[..., 1], dirs[..., 0]), 2 * math.pi)
        row = (theta / math.pi * height).long().clamp(0, height - 1)
        col = (phi / (2 * math.pi) * width).long().clamp(0, width - 1)
        return row, col
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(dirs[..., 1], dirs[..., 0]), 2 * np.pi)
    row = np.clip((theta / np.pi * height).astype(np.int64), 0, height - 1)
    col = np.clip((phi / (2 * np.pi) * width).astype(np.int64), 0, width - 1)
    return row, col


def texel_to_dir(row, col, width: int, height: int) -> np.ndarray:
    theta = (np.asarray(row, dtype=np.float64) + 0.5) * np.pi / height
    phi = (np.asarray(col, dtype=np.float64) + 0.5) * 2 * np.pi / width
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)


def texel_directions(width: int = ENV_WIDTH, height: int = ENV_HEIGHT) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return texel_to_dir(rows, cols, width, height)


def env_lookup(env: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Nearest-texel radiance for directions (..., 3); env is (H, W, 3)."""
    h, w = env.shape[:2]
    row, col = dir_to_texel(dirs, w, h)
    return env.reshape(h * w, -1)[row * w + col]


def rotate_env(env: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a lat-long map about +z by a whole number of columns."""
    w = env.shape[1]
    shift = int(round(degrees / 360.0 * w))
    return np.roll(env, shift, axis=1)


def lower_hemisphere_mask(width: int = ENV_WIDTH, height: int = ENV_HEIGHT) -> np.ndarray:
    return texel_directions(width, height)[..., 2] < 0


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def stratified_hemisphere(normals, n_rays: int, rng: Rng, dtype=None) -> torch.Tensor:
    """Jittered sqrt(N) x sqrt(N) strata over (1 - cos(theta), phi), uniform
    hemisphere pdf 1 / (2 pi), rotated about each normal.

    ``normals`` is (P, 3) (or a single 3-vector); returns (P, k*k, 3).
    """
    if n_rays < 1:
        raise ValueError("need at least one ray")
    k = math.isqrt(n_rays)
    n = torch.as_tensor(normals, dtype=dtype or torch.float64)
    if n.dim() == 1:
        n = n[None]
    p = n.shape[0]
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    jitter = rng.uniform(size=(p, k * k, 2))
    uu = (ii[None] + jitter[..., 0]) / k
    phi = 2 * np.pi * (jj[None] + jitter[..., 1]) / k
    cos_t = 1.0 - uu
    sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, 1.0))
    local = torch.as_tensor(np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], -1), dtype=n.dtype)
    t1, t2 = orthonormal_basis(n)
    return (local[..., 0:1] * t1[:, None] + local[..., 1:2] * t2[:, None] + local[..., 2:3] * n[:, None])


@torch.no_grad()
def hemisphere_candidates(origins, normals, k: int, means, radius, splat_normals=None):
    """(ray, splat) pairs for the stratified rays of :func:`stratified_hemisphere`.

    Ray ``p * k*k + i * k + j`` lies in stratum (i, j) of origin p. Each
    splat's bounding sphere is mapped to the range of strata its cone
    overlaps, so only those pairs are enumerated; the caller still applies
    the exact sphere test. With ``splat_normals`` given, disks lying wholly
    on or below an origin's tangent plane are skipped (no upper-hemisphere
    ray can reach them).
    """
    P, N = origins.shape[0], means.shape[0]
    if P == 0 or N == 0:
        e = torch.zeros(0, dtype=torch.long)
        return e, e
    dt = means.dtype
    t1, t2 = orthonormal_basis(normals)
    v = means.detach()[None] - origins[:, None]                 # (P, N, 3)
    dist = v.norm(dim=-1).clamp_min(1e-12)
    r = radius[None].expand(P, N)
    inside = dist <= r
    lz = (v * normals[:, None]).sum(-1) / dist
    lx = (v * t1[:, None]).sum(-1) / dist
    ly = (v * t2[:, None]).sum(-1) / dist
    theta = torch.acos(lz.clamp(-1, 1))
    beta = torch.asin((r / dist).clamp(max=1.0))
    th_lo = (theta - beta).clamp_min(0.0)
    th_hi = (theta + beta).clamp(max=math.pi / 2)
    above = th_lo <= math.pi / 2
    if splat_normals is not None:
        h = (v * normals[:, None]).sum(-1)
        cos_mn = (splat_normals.detach()[None] * normals[:, None]).sum(-1)
        reach = r * torch.sqrt((1 - cos_mn * cos_mn).clamp_min(0.0))
        above &= h + reach > 0
        inside &= h + reach > 0
    i0 = torch.floor((1 - torch.cos(th_lo)) * k).long().clamp(0, k - 1)
    i1 = torch.floor((1 - torch.cos(th_hi)) * k).long().clamp(0, k - 1)
    phi = torch.remainder(torch.atan2(ly, lx), 2 * math.pi)
    ratio = torch.sin(beta) / torch.sin(theta).clamp_min(1e-12)
    all_phi = (theta - beta <= 0) | (ratio >= 1)
    dphi = torch.asin(ratio.clamp(max=1.0))
    j0 = torch.floor((phi - dphi) * k / (2 * math.pi)).long()
    j1 = torch.floor((phi + dphi) * k / (2 * math.pi)).long()
    nj = torch.where(all_phi, torch.full_like(j0, k), (j1 - j0 + 1).clamp(max=k))
    j0 = torch.where(all_phi, torch.zeros_like(j0), j0)
    ni = i1 - i0 + 1
    i0 = torch.where(inside, torch.zeros_like(i0), i0)
    ni = torch.where(inside, torch.full_like(ni, k), ni)
    nj = torch.where(inside, torch.full_like(nj, k), nj)
    cnt = torch.where(above | inside, ni * nj, torch.zeros_like(ni)).reshape(-1)
    pair = torch.repeat_interleave(torch.arange(P * N), cnt)
    if pair.numel() == 0:
        e = torch.zeros(0, dtype=torch.long)
        return e, e
    start = torch.cumsum(cnt, 0) - cnt
    off = torch.arange(pair.numel()) - start[pair]
    njf, i0f, j0f = nj.reshape(-1)[pair], i0.reshape(-1)[pair], j0.reshape(-1)[pair]
    i = i0f + off // njf
    j = torch.remainder(j0f + off % njf, k)
    p = pair // N
    return p * k * k + i * k + j, pair % N


# ---------------------------------------------------------------------------
# BRDF
# ---------------------------------------------------------------------------

def _dot(a, b):
    return (a * b).sum(-1, keepdim=True)


def brdf_eval(albedo, roughness, n, wi, wo, *, f0: float = F0_DIELECTRIC, specular: bool = True):
    """rho / pi + D F G / (4 (wi.n)(wo.n)).

    D: GGX with a = roughness^2; F: Schlick; G: height-correlated Smith.
    The specular lobe is zero unless both directions are above the surface.
    ``roughness`` broadcasts with a trailing singleton channel.
    """
    albedo = torch.as_tensor(albedo)
    diffuse = albedo / math.pi
    if not specular:
        return diffuse.expand(torch.broadcast_shapes(diffuse.shape, wi.shape[:-1] + (1,)))
    rough = torch.as_tensor(roughness, dtype=wi.dtype)
    if rough.dim() == 0 or rough.shape[-1] != 1:
        rough = rough[..., None]
    ndl = _dot(n, wi)
    ndv = _dot(n, wo)
    upper = (ndl > 0) & (ndv > 0)
    ndl_c = ndl.clamp_min(1e-6)
    ndv_c = ndv.clamp_min(1e-6)
    hv = wi + wo
    h = hv / hv.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    ndh = _dot(n, h).clamp(0.0, 1.0)
    vdh = _dot(wo, h).clamp(0.0, 1.0)
    a2 = (rough * rough) ** 2
    a2 = a2.clamp_min(1e-8)
    denom_d = ndh * ndh * (a2 - 1.0) + 1.0
    d = a2 / (math.pi * denom_d * denom_d)
    f = f0 + (1.0 - f0) * (1.0 - vdh) ** 5

    def smith_lambda(c):
        tan2 = (1.0 - c * c) / (c * c)
        return 0.5 * (torch.sqrt(1.0 + a2 * tan2) - 1.0)

    g = 1.0 / (1.0 + smith_lambda(ndl_c) + smith_lambda(ndv_c))
    spec = d * f * g / (4.0 * ndl_c * ndv_c).clamp_min(1e-6)
    spec = torch.where(upper, spec, torch.zeros_like(spec))
    return diffuse + spec


# ---------------------------------------------------------------------------
# Ray traced visibility / indirect light
# ---------------------------------------------------------------------------

@dataclass
class TraceScene:
    """Splat geometry seen by secondary rays plus per-splat radiance."""

    means: torch.Tensor
    frames: torch.Tensor
    scales: torch.Tensor
    opacity: torch.Tensor
    radiance: Optional[torch.Tensor] = None       # (N, 3), front side
    radiance_back: Optional[torch.Tensor] = None  # (N, 3), optional back side

    def trace(self, origins, dirs, settings: RenderSettings = DEFAULT_SETTINGS, candidates=None):
        return trace(origins, dirs, self.means, self.frames, self.scales, self.opacity,
                     settings=settings, candidates=candidates)

    def radius(self, settings: RenderSettings = DEFAULT_SETTINGS) -> torch.Tensor:
        return settings.cutoff_sigma * self.scales.detach().max(dim=-1).values

    def hit_radiance(self, hits) -> torch.Tensor:
        rad = self.radiance[hits.gidx]
        if self.radiance_back is not None:
            # The facing normal is flipped exactly when the back side was hit.
            n = self.frames[hits.gidx][..., 2]
            back = ((hits.normal * n).sum(-1, keepdim=True) < 0).detach()
            rad = torch.where(back, self.radiance_back[hits.gidx], rad)
        return rad


def trace_visibility(x, wi, scene: TraceScene, normal=None, *, eps: float = 1e-3,
                     settings: RenderSettings = DEFAULT_SETTINGS) -> torch.Tensor:
    """Transmittance from ``x`` (offset by eps along ``normal``) towards wi."""
    x, wi = torch.as_tensor(x), torch.as_tensor(wi)
    origins = x if normal is None else x + eps * torch.as_tensor(normal, dtype=x.dtype)
    single = origins.dim() == 1
    o = origins.reshape(-1, 3)
    d = wi.reshape(-1, 3)
    o = o.expand(d.shape[0], 3) if o.shape[0] == 1 else o
    v = scene.trace(o, d, settings).final_trans
    return v[0] if single else v


def trace_indirect(x, wi, scene: TraceScene, normal=None, *, eps: float = 1e-3,
                   settings: RenderSettings = DEFAULT_SETTINGS) -> torch.Tensor:
    """Alpha-composited splat radiance along the secondary ray."""
    x, wi = torch.as_tensor(x), torch.as_tensor(wi)
    origins = x if normal is None else x + eps * torch.as_tensor(normal, dtype=x.dtype)
    single = origins.dim() == 1
    o = origins.reshape(-1, 3)
    d = wi.reshape(-1, 3)
    o = o.expand(d.shape[0], 3) if o.shape[0] == 1 else o
    hits = scene.trace(o, d, settings)
    out = hits.blend(scene.hit_radiance(hits))
    return out[0] if single else out


def shade_points(x, n, albedo, roughness, wo, env: torch.Tensor, scene: Optional[TraceScene],
                 n_rays: int, rng: Rng, *, indirect: bool = True, eps: float = 1e-3,
                 f0: float = F0_DIELECTRIC, specular: bool = True,
                 settings: RenderSettings = DEFAULT_SETTINGS, dirs: Optional[torch.Tensor] = None):
    """Monte Carlo rendering equation at P shading points.

    c = (2 pi / N) sum_i f_r(w_i, w_o) [V(w_i) L_env(w_i) + L_ind(w_i)] (w_i . n)_+
    with N jittered-stratified uniform hemisphere directions per point.
    ``scene=None`` means no occluders and no indirect light.
    """
    p = x.shape[0]
    stratified = dirs is None
    if stratified:
        dirs = stratified_hemisphere(n, n_rays, rng, dtype=x.dtype)
    s = dirs.shape[1]
    cos = _dot(dirs, n[:, None]).clamp_min(0.0)
    le = env_lookup(env, dirs)
    if scene is not None and p > 0:
        start = (x + eps * n).detach()
        origins = (x + eps * n)[:, None].expand(p, s, 3).reshape(-1, 3)
        flat_dirs = dirs.reshape(-1, 3)
        cand = None
        if stratified:
            from .splat import sphere_filter

            radius = scene.radius(settings)
            ri, gi = hemisphere_candidates(start, n.detach(), math.isqrt(s), scene.means, radius,
                                           scene.frames[..., 2])
            cand = sphere_filter(origins.detach(), flat_dirs.detach(), scene.means, radius, ri, gi)
        hits = scene.trace(origins, flat_dirs, settings, candidates=cand)
        vis = hits.final_trans.reshape(p, s, 1)
        incoming = vis * le
        if indirect and scene.radiance is not None:
            incoming = incoming + hits.blend(scene.hit_radiance(hits)).reshape(p, s, 3)
    else:
        incoming = le
    fr = brdf_eval(albedo[:, None], roughness.reshape(p, 1, 1), n[:, None], dirs, wo[:, None],
                   f0=f0, specular=specular)
    return (2 * math.pi / s) * (fr * incoming * cos).sum(1)


def shade_pixel(gpix: dict, env, scene, n_rays: int, rng: Rng, *, threshold: float = 0.5, **kw):
    """Shade one G-buffer pixel given as a dict of blended values; returns
    None for background pixels (opacity <= threshold)."""
    op = float(gpix["opacity"])
    if op <= threshold:
        return None

    def t(name):
        return torch.as_tensor(np.asarray(gpix[name], dtype=np.float64)).reshape(1, -1).to(env.dtype)

    x = t("position") / op
    nrm = t("normal")
    nrm = nrm / nrm.norm()
    wo = t("view")
    return shade_points(x, nrm, t("albedo") / op, t("roughness")[:, 0] / op, wo, env, scene,
                        n_rays, rng, **kw)[0]


def gbuffer_shading_inputs(gb: GBuffer, pixels: torch.Tensor, cam_center) -> dict:
    """Opacity-normalised per-pixel attributes for the selected pixels."""
    op = gb.pixels("opacity")[pixels]
    inv = 1.0 / op.clamp_min(1e-6)
    x = gb.pixels("position")[pixels] * inv
    c = torch.as_tensor(np.asarray(cam_center, dtype=np.float64), dtype=x.dtype)
    wo = c - x
    wo = wo / wo.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return {
        "opacity": op, "x": x, "n": gb.pixels("normal")[pixels], "wo": wo,
        "albedo": gb.pixels("albedo")[pixels] * inv,
        "roughness": (gb.pixels("roughness")[pixels] * inv)[:, 0],
    }


def shade_gbuffer(gb: GBuffer, cam_center, env, scene, n_rays: int, rng: Rng, *,
                  pixels: Optional[torch.Tensor] = None, threshold: float = 0.5, **kw):
    """Deferred shading; returns (pixel indices, opacity-weighted colours)."""
    if pixels is None:
        pixels = (gb.pixels("opacity")[:, 0].detach() > threshold).nonzero(as_tuple=True)[0]
    inp = gbuffer_shading_inputs(gb, pixels, cam_center)
    c = shade_points(inp["x"], inp["n"], inp["albedo"], inp["roughness"], inp["wo"], env, scene,
                     n_rays, rng, **kw)
    return pixels, c * inp["opacity"]


# ---------------------------------------------------------------------------
# Relighting
# ---------------------------------------------------------------------------

INDIRECT_MODES = ("pbr", "stage1", "off")


def gaussian_pbr_colors(means, frames, scene: TraceScene, albedo, roughness, env, n_rays: int, rng: Rng, *,
                        eps: float = 1e-3, settings: RenderSettings = DEFAULT_SETTINGS):
    """Front and back PBR radiance of every splat under ``env`` (direct light
    with visibility, no further bounce). Viewed along the splat normal."""
    out = []
    occl = TraceScene(scene.means, scene.frames, scene.scales, scene.opacity)
    for side, sign in enumerate((1.0, -1.0)):
        n = sign * frames[..., 2]
        out.append(shade_points(means, n, albedo, roughness, n, env, occl, n_rays, rng.spawn(side),
                                indirect=False, eps=eps, settings=settings))
    return out[0], out[1]


@torch.no_grad()
def relight(model, cam, env, n_rays: int = 256, *, seed: int = 0, indirect: str = "pbr",
            pbr_rays: int = 64, threshold: float = 0.5, chunk: int = 256,
            settings: RenderSettings = DEFAULT_SETTINGS):
    """Shade every foreground pixel of the G-buffer at ``cam`` under ``env``.

    ``indirect`` selects the radiance seen by bounce rays: per-splat PBR
    colours under ``env`` ("pbr"), the time-modulated Stage-1 colours
    ("stage1"), or nothing ("off"). Returns (H, W, 3) linear radiance
    composited over black.
    """
    if indirect not in INDIRECT_MODES:
        raise ValueError(f"indirect must be one of {INDIRECT_MODES}, got {indirect!r}")
    if not getattr(model, "has_materials", False):
        raise ValueError("model has no trained materials; run stage 2 first")
    dtype = model.cloud.means.dtype
    env = torch.as_tensor(np.asarray(env, dtype=np.float32) if not torch.is_tensor(env) else env, dtype=dtype)
    rng = Rng(seed, 31)
    state = model.deformed(cam.time)
    gb = model.render(cam, "gbuffer", state=state, settings=settings)
    scene = model.trace_scene(state)
    if indirect == "stage1":
        scene.radiance = state["color"]
    elif indirect == "pbr":
        c = model.cloud
        scene.radiance, scene.radiance_back = gaussian_pbr_colors(
            state["means"], scene.frames, scene, c.albedo, c.roughness, env, pbr_rays, rng.spawn(0),
            eps=model.surface_eps, settings=settings)
    fg = (gb.pixels("opacity")[:, 0] > threshold).nonzero(as_tuple=True)[0]
    image = torch.zeros(cam.height * cam.width, 3, dtype=dtype)
    for k, start in enumerate(range(0, fg.numel(), chunk)):
        px = fg[start:start + chunk]
        _, col = shade_gbuffer(gb, cam.center, env, scene, n_rays, rng.spawn(1, k), pixels=px,
                               indirect=indirect != "off", eps=model.surface_eps, settings=settings)
        image[px] = col
    return image.reshape(cam.height, cam.width, 3)
