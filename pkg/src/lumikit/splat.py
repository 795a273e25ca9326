"""2D Gaussian splats: ray-splat intersection, depth ordering and front-to-back
alpha compositing into colour images and deferred-shading G-buffers.

Every pixel is rendered by explicit ray-splat intersection, so the same
``trace`` routine also serves shadow and indirect rays. Candidate pairs are
found with a cheap bounding-sphere test and only those are intersected with
gradients enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .geometry import Camera, camera_rays, quat_normalize, quat_to_rotmat


@dataclass
class Gaussian2D:
    """A single flat-disk primitive (plain python values)."""

    mean: Sequence[float]
    quat: Sequence[float] = (1.0, 0.0, 0.0, 0.0)
    scale_u: float = 0.1
    scale_v: float = 0.1
    opacity: float = 0.9
    color: Sequence[float] = (0.5, 0.5, 0.5)
    albedo: Sequence[float] = (0.5, 0.5, 0.5)
    roughness: float = 0.5
    logit: float = 0.01


@dataclass
class GaussianCloud:
    """Structure-of-arrays storage for N splats."""

    means: torch.Tensor      # (N, 3)
    quats: torch.Tensor      # (N, 4) w, x, y, z
    scales: torch.Tensor     # (N, 2)
    opacity: torch.Tensor    # (N,)
    color: torch.Tensor      # (N, 3)
    albedo: torch.Tensor     # (N, 3)
    roughness: torch.Tensor  # (N,)
    logit: torch.Tensor      # (N,)

    @classmethod
    def from_splats(cls, splats: Sequence[Gaussian2D], dtype=torch.float32) -> "GaussianCloud":
        def col(fn, width=None):
            vals = [fn(g) for g in splats]
            t = torch.tensor(np.asarray(vals, dtype=np.float64), dtype=dtype)
            if width is not None:
                t = t.reshape(-1, width)
            return t
        return cls(
            means=col(lambda g: g.mean, 3),
            quats=quat_normalize(col(lambda g: g.quat, 4)),
            scales=col(lambda g: (g.scale_u, g.scale_v), 2),
            opacity=col(lambda g: g.opacity),
            color=col(lambda g: g.color, 3),
            albedo=col(lambda g: g.albedo, 3),
            roughness=col(lambda g: g.roughness),
            logit=col(lambda g: g.logit),
        )

    @classmethod
    def empty(cls, dtype=torch.float32) -> "GaussianCloud":
        return cls.from_splats([], dtype)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            mean=self.means[i].tolist(), quat=self.quats[i].tolist(),
            scale_u=float(self.scales[i, 0]), scale_v=float(self.scales[i, 1]),
            opacity=float(self.opacity[i]), color=self.color[i].tolist(),
            albedo=self.albedo[i].tolist(), roughness=float(self.roughness[i]),
            logit=float(self.logit[i]),
        )

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn) -> "GaussianCloud":
        return GaussianCloud(**{k: fn(v) for k, v in self.tensors().items()})

    def clone(self) -> "GaussianCloud":
        return self.map(lambda t: t.detach().clone())

    def to(self, dtype) -> "GaussianCloud":
        return self.map(lambda t: t.detach().to(dtype))

    def subset(self, idx) -> "GaussianCloud":
        return self.map(lambda t: t[idx])

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        a, b = self.tensors(), other.tensors()
        return GaussianCloud(**{k: torch.cat([a[k], b[k]]) for k in a})

    @torch.no_grad()
    def clamp_(self, min_scale: float = 1e-4) -> None:
        self.scales.clamp_(min=min_scale)
        self.opacity.clamp_(0.0, 1.0)
        self.color.clamp_(0.0, 1.0)
        self.albedo.clamp_(0.0, 1.0)
        self.roughness.clamp_(0.0, 1.0)
        self.quats.copy_(quat_normalize(self.quats))


@dataclass(frozen=True)
class RenderSettings:
    """Compositing thresholds.

    ``cutoff_sigma`` bounds the candidate search sphere in units of the
    larger scale; it must stay above sqrt(2 ln(255)) ~ 3.33 so that no pair
    with alpha >= ``min_alpha`` is dropped by the prefilter.
    """

    cutoff_sigma: float = 3.5
    min_alpha: float = 1.0 / 255.0
    max_alpha: float = 0.999
    min_transmittance: float = 1e-4
    early_exit: bool = True
    near: float = 0.01
    chunk: int = 4096


DEFAULT_SETTINGS = RenderSettings()
# No thresholds besides the 0.999 clamp; used by reference comparisons and
# gradient checks.
EXACT_SETTINGS = RenderSettings(cutoff_sigma=9.0, min_alpha=0.0, early_exit=False)


@dataclass
class Hits:
    """Ray-splat intersections sorted by (ray, compositing order)."""

    num_rays: int
    ray: torch.Tensor        # (K,) long
    gidx: torch.Tensor       # (K,) long
    t: torch.Tensor          # (K,) distance along the ray
    u: torch.Tensor
    v: torch.Tensor
    alpha: torch.Tensor
    weight: torch.Tensor     # alpha * transmittance-before
    trans: torch.Tensor      # transmittance before each hit
    point: torch.Tensor      # (K, 3) world-space hit
    normal: torch.Tensor     # (K, 3) splat normal facing the ray origin
    final_trans: torch.Tensor  # (R,) product of (1 - alpha) over all hits

    def blend(self, values: torch.Tensor) -> torch.Tensor:
        """Sum_i w_i * values_i per ray; ``values`` is per-hit (K, C) or (K,)."""
        squeeze = values.dim() == 1
        if squeeze:
            values = values[:, None]
        out = values.new_zeros(self.num_rays, values.shape[1])
        out = out.index_add(0, self.ray, self.weight[:, None] * values)
        return out[:, 0] if squeeze else out

    def blend_gaussian(self, attr: torch.Tensor) -> torch.Tensor:
        return self.blend(attr[self.gidx])

    def opacity(self) -> torch.Tensor:
        return self.blend(torch.ones_like(self.weight))


def splat_frames(quats: torch.Tensor) -> torch.Tensor:
    """(N, 3, 3) rotation matrices whose columns are t_u, t_v, n."""
    return quat_to_rotmat(quat_normalize(quats))


def ray_splat_intersect(origin, direction, g: Gaussian2D):
    """Intersect one ray with one splat.

    Returns ``(u, v, depth, weight)`` with u, v in units of the splat scales
    and depth the distance along the (unit) ray, or ``None`` when the ray is
    parallel to the disk or the disk plane lies behind the origin.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    mu = np.asarray(g.mean, dtype=np.float64)
    rot = quat_to_rotmat(np.asarray(g.quat, dtype=np.float64) / np.linalg.norm(g.quat))
    t_u, t_v, n = rot[:, 0], rot[:, 1], rot[:, 2]
    denom = float(d @ n)
    if abs(denom) < 1e-9:
        return None
    t = float((mu - o) @ n) / denom
    if t <= 0:
        return None
    local = o + t * d - mu
    u = float(local @ t_u) / g.scale_u
    v = float(local @ t_v) / g.scale_v
    return u, v, t, float(np.exp(-0.5 * (u * u + v * v)))


@torch.no_grad()
def _candidates(origins, dirs, means, radius, active, chunk):
    """Bounding-sphere prefilter; returns (ray, gaussian) index pairs."""
    if means.shape[0] == 0 or origins.shape[0] == 0:
        e = torch.zeros(0, dtype=torch.long)
        return e, e
    mu = means.detach()
    mu2 = (mu * mu).sum(-1)
    r2 = radius * radius
    rays, gs = [], []
    for s0 in range(0, origins.shape[0], chunk):
        o = origins[s0:s0 + chunk].detach()
        d = dirs[s0:s0 + chunk].detach()
        s = d @ mu.T - (o * d).sum(-1, keepdim=True)
        dist2 = mu2[None, :] + (o * o).sum(-1, keepdim=True) - 2.0 * (o @ mu.T)
        perp2 = dist2 - s.clamp_min(0.0) ** 2
        hit = (perp2 < r2[None, :]) & (s > -radius[None, :])
        if active is not None:
            hit &= active[None, :]
        ri, gi = hit.nonzero(as_tuple=True)
        rays.append(ri + s0)
        gs.append(gi)
    return torch.cat(rays), torch.cat(gs)


@torch.no_grad()
def _screen_candidates(cam: Camera, origins, dirs, means, radius, active):
    """Same pairs as :func:`_candidates` for the primary rays of ``cam``, found
    by enumerating the pixels inside each splat's projected bounding box."""
    n = means.shape[0]
    dtype = means.dtype
    rot = torch.as_tensor(cam.rotation, dtype=dtype)
    pc = (means.detach() - torch.as_tensor(cam.center, dtype=dtype)) @ rot
    keep = active.clone() if active is not None else torch.ones(n, dtype=torch.bool)
    zc = pc[:, 2]
    keep &= zc + radius > 0
    straddle = zc - radius <= 1e-6
    W, H = cam.width, cam.height

    def bounds(xc, f, c, size):
        zs = (zc[:, None] + torch.stack([-radius, radius], -1)).clamp_min(1e-6)
        xs = xc[:, None, None] + torch.stack([-radius, radius], -1)[:, :, None]
        proj = f * xs / zs[:, None, :] + c
        lo = proj.flatten(1).min(-1).values
        hi = proj.flatten(1).max(-1).values
        lo = torch.where(straddle, torch.full_like(lo, -1e9), lo)
        hi = torch.where(straddle, torch.full_like(hi, 1e9), hi)
        a = torch.ceil(lo - 0.5).clamp(0, size - 1e-3).long()
        b = torch.floor(hi - 0.5).clamp(-1, size - 1).long()
        return a, b

    c0, c1 = bounds(pc[:, 0], cam.fx, cam.cx, W)
    r0, r1 = bounds(pc[:, 1], cam.fy, cam.cy, H)
    nx = (c1 - c0 + 1).clamp_min(0)
    ny = (r1 - r0 + 1).clamp_min(0)
    cnt = torch.where(keep, nx * ny, torch.zeros_like(nx))
    gi = torch.repeat_interleave(torch.arange(n), cnt)
    if gi.numel() == 0:
        e = torch.zeros(0, dtype=torch.long)
        return e, e
    start = torch.cumsum(cnt, 0) - cnt
    off = torch.arange(gi.numel()) - start[gi]
    col = c0[gi] + off % nx[gi]
    row = r0[gi] + off // nx[gi]
    ri = row * W + col
    # sphere test with the shared origin folded into per-splat offsets
    v = means.detach() - origins[0]
    s = (v[gi] * dirs[ri]).sum(-1)
    perp2 = (v * v).sum(-1)[gi] - s.clamp_min(0.0) ** 2
    r = radius[gi]
    hit = (perp2 < r * r) & (s > -r)
    return ri[hit], gi[hit]


@torch.no_grad()
def sphere_filter(origins, dirs, means, radius, ri, gi):
    """Keep the (ray, splat) pairs passing the bounding-sphere test of
    :func:`_candidates`."""
    o, d, mu = origins[ri], dirs[ri], means.detach()[gi]
    s = ((mu - o) * d).sum(-1)
    dist2 = ((mu - o) ** 2).sum(-1)
    perp2 = dist2 - s.clamp_min(0.0) ** 2
    r = radius[gi]
    hit = (perp2 < r * r) & (s > -r)
    return ri[hit], gi[hit]


def _intersect(o, d, mu, fr, sc, op, max_alpha):
    t_u, t_v, n = fr[..., 0], fr[..., 1], fr[..., 2]
    denom = (d * n).sum(-1)
    ok = denom.detach().abs() >= 1e-9
    safe = torch.where(ok, denom, torch.ones_like(denom))
    t = ((mu - o) * n).sum(-1) / safe
    p = o + t[:, None] * d
    local = p - mu
    u = (local * t_u).sum(-1) / sc[:, 0]
    v = (local * t_v).sum(-1) / sc[:, 1]
    alpha = (op * torch.exp(-0.5 * (u * u + v * v))).clamp(max=max_alpha)
    return ok, t, u, v, p, alpha, n


def trace(origins: torch.Tensor, dirs: torch.Tensor, means: torch.Tensor, frames: torch.Tensor,
          scales: torch.Tensor, opacity: torch.Tensor, *, order: Optional[torch.Tensor] = None,
          settings: RenderSettings = DEFAULT_SETTINGS, t_min: float = 0.0,
          camera: Optional[Camera] = None, candidates=None) -> Hits:
    """Intersect R rays with N splats and compute compositing weights.

    ``order`` is an optional per-splat rank (``-1`` excludes a splat); when
    given, hits are composited in rank order (global depth sort of the
    rasterizer), otherwise by distance along each ray (ray tracing). Passing
    the ``camera`` whose full set of primary rays is being traced enables a
    screen-space candidate search; ``candidates`` may supply a superset of
    the (ray, splat) pairs directly.
    """
    R = origins.shape[0]
    active = None if order is None else order >= 0
    radius = settings.cutoff_sigma * scales.detach().max(dim=-1).values
    if candidates is not None:
        ri, gi = candidates
        if active is not None:
            sel = active[gi]
            ri, gi = ri[sel], gi[sel]
    elif camera is not None:
        ri, gi = _screen_candidates(camera, origins, dirs, means, radius, active)
    else:
        ri, gi = _candidates(origins, dirs, means, radius, active, settings.chunk)

    # Cheap no-grad pass to drop misses, then the differentiable pass on the
    # surviving pairs only, already in compositing order.
    with torch.no_grad():
        ok, t, _, _, _, alpha, _ = _intersect(origins[ri], dirs[ri], means[gi], frames[gi], scales[gi],
                                              opacity[gi], settings.max_alpha)
        ok &= (t > max(t_min, 0.0)) & (alpha >= settings.min_alpha) & (alpha > 0)
        keep = ok.nonzero(as_tuple=True)[0]
        ri, gi, t = ri[keep], gi[keep], t[keep]
        if order is None:
            perm = torch.argsort(t, stable=True)
            perm = perm[torch.argsort(ri[perm], stable=True)]
        else:
            perm = torch.argsort(ri * (order.shape[0] + 1) + order[gi])
        ri, gi = ri[perm], gi[perm]

    d = dirs[ri]
    _, t, u, v, p, alpha, n = _intersect(origins[ri], d, means[gi], frames[gi], scales[gi], opacity[gi],
                                         settings.max_alpha)

    facing = torch.where((n * d).sum(-1, keepdim=True).detach() > 0, -n, n)

    # Exclusive segmented cumulative sum of log(1 - alpha); float64 keeps the
    # long global running sum accurate.
    log1m = torch.log1p(-alpha)
    cs = torch.cumsum(log1m.double(), 0)
    excl = cs - log1m.double()
    K = ri.shape[0]
    if K:
        first = torch.ones(K, dtype=torch.bool)
        first[1:] = ri[1:] != ri[:-1]
        seg_start = torch.cummax(torch.where(first, torch.arange(K), torch.zeros(K, dtype=torch.long)), 0).values
        excl = excl - excl[seg_start]
    trans = torch.exp(excl).to(alpha.dtype)
    weight = alpha * trans
    if settings.early_exit:
        live = trans.detach() >= settings.min_transmittance
        weight = torch.where(live, weight, torch.zeros_like(weight))
    total = alpha.new_zeros(R).index_add(0, ri, log1m)
    return Hits(R, ri, gi, t, u, v, alpha, weight, trans, p, facing, torch.exp(total))


@torch.no_grad()
def cull_and_sort(means: torch.Tensor, scales: torch.Tensor, cam: Camera, near: float = 0.01) -> torch.Tensor:
    """Indices of splats inside the margin-expanded frustum, nearest first."""
    if means.shape[0] == 0:
        return torch.zeros(0, dtype=torch.long)
    rot = torch.as_tensor(cam.rotation, dtype=means.dtype)
    c = torch.as_tensor(cam.center, dtype=means.dtype)
    pc = (means.detach() - c) @ rot
    z = pc[:, 2]
    zs = z.clamp_min(near)
    margin = 3.0 * scales.detach().max(dim=-1).values
    x = cam.fx * pc[:, 0] / zs + cam.cx
    y = cam.fy * pc[:, 1] / zs + cam.cy
    mx = cam.fx * margin / zs
    my = cam.fy * margin / zs
    inside = (z > near) & (x >= -mx) & (x <= cam.width + mx) & (y >= -my) & (y <= cam.height + my)
    idx = inside.nonzero(as_tuple=True)[0]
    perm = torch.argsort(z[idx], stable=True)
    return idx[perm]


def order_ranks(sorted_idx: torch.Tensor, n: int) -> torch.Tensor:
    rank = torch.full((n,), -1, dtype=torch.long)
    rank[sorted_idx] = torch.arange(sorted_idx.shape[0])
    return rank


@dataclass
class GBuffer:
    """Per-pixel blended maps, each (H, W, C). Blended values are not divided
    by the accumulated opacity; ``normal`` is normalised where covered."""

    width: int
    height: int
    opacity: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    normal_raw: torch.Tensor
    position: torch.Tensor
    color: Optional[torch.Tensor] = None
    albedo: Optional[torch.Tensor] = None
    roughness: Optional[torch.Tensor] = None
    extra: dict = field(default_factory=dict)
    hits: Optional[Hits] = None
    view_dirs: Optional[torch.Tensor] = None  # (H*W, 3)

    def pixels(self, name: str) -> torch.Tensor:
        t = getattr(self, name) if hasattr(self, name) else self.extra[name]
        return t.reshape(self.height * self.width, -1)


def composite_pixel(origin, direction, cloud: GaussianCloud, order: Sequence[int],
                    attributes: dict[str, torch.Tensor], *,
                    settings: RenderSettings = DEFAULT_SETTINGS) -> tuple[dict, float, float]:
    """Composite one ray through splats ``order`` (front to back).

    Returns blended attributes, accumulated opacity and blended depth.
    """
    dtype = cloud.means.dtype
    o = torch.as_tensor(np.asarray(origin, dtype=np.float64), dtype=dtype)[None]
    d = torch.as_tensor(np.asarray(direction, dtype=np.float64), dtype=dtype)[None]
    rank = order_ranks(torch.as_tensor(list(order), dtype=torch.long), len(cloud))
    hits = trace(o, d, cloud.means, splat_frames(cloud.quats), cloud.scales, cloud.opacity,
                 order=rank, settings=settings)
    out = {k: hits.blend_gaussian(v)[0] for k, v in attributes.items()}
    out["normal"] = hits.blend(hits.normal)[0]
    out["position"] = hits.blend(hits.point)[0]
    return out, float(hits.opacity()[0]), float(hits.blend(hits.t)[0])


def rasterize(cloud: GaussianCloud, cam: Camera, mode: str = "color", *,
              means: Optional[torch.Tensor] = None, quats: Optional[torch.Tensor] = None,
              colors: Optional[torch.Tensor] = None, opacity: Optional[torch.Tensor] = None,
              extra: Optional[dict[str, torch.Tensor]] = None,
              settings: RenderSettings = DEFAULT_SETTINGS, pixels: Optional[torch.Tensor] = None) -> GBuffer:
    """Render ``cloud`` (optionally with deformed means/quats/colors) at ``cam``.

    ``mode="color"`` blends colours; ``"gbuffer"`` blends albedo and
    roughness as well; ``"all"`` does both. Geometry maps (opacity, depth,
    normals, positions) are always produced.
    """
    if mode not in ("color", "gbuffer", "all"):
        raise ValueError(f"unknown rasterize mode {mode!r}")
    dtype = cloud.means.dtype
    means = cloud.means if means is None else means
    quats = cloud.quats if quats is None else quats
    colors = cloud.color if colors is None else colors
    opacity = cloud.opacity if opacity is None else opacity

    o_np, d_np = camera_rays(cam)
    origins = torch.as_tensor(o_np, dtype=dtype)
    dirs = torch.as_tensor(d_np, dtype=dtype)
    if pixels is not None:
        origins, dirs = origins[pixels], dirs[pixels]
    sorted_idx = cull_and_sort(means, cloud.scales, cam, settings.near)
    rank = order_ranks(sorted_idx, len(cloud))
    hits = trace(origins, dirs, means, splat_frames(quats), cloud.scales, opacity,
                 order=rank, settings=settings, camera=cam if pixels is None else None)

    fwd = torch.as_tensor(cam.forward, dtype=dtype)
    z_hit = hits.t * (dirs[hits.ray] @ fwd)
    H, W = (cam.height, cam.width) if pixels is None else (1, int(origins.shape[0]))

    def img(x):
        return x.reshape(H, W, -1)

    op = hits.opacity()
    nraw = hits.blend(hits.normal)
    nlen = nraw.norm(dim=-1, keepdim=True)
    covered = nlen.detach() > 1e-8
    nunit = torch.where(covered, nraw / nlen.clamp_min(1e-8), torch.zeros_like(nraw))
    gb = GBuffer(
        width=W, height=H, opacity=img(op), depth=img(hits.blend(z_hit)),
        normal=img(nunit), normal_raw=img(nraw), position=img(hits.blend(hits.point)),
        hits=hits, view_dirs=dirs,
    )
    gb.extra["z_hit"] = z_hit
    if mode in ("color", "all"):
        gb.color = img(hits.blend_gaussian(colors))
    if mode in ("gbuffer", "all"):
        gb.albedo = img(hits.blend_gaussian(cloud.albedo))
        gb.roughness = img(hits.blend_gaussian(cloud.roughness))
    for k, v in (extra or {}).items():
        gb.extra[k] = img(hits.blend_gaussian(v))
    return gb


def depth_to_normal(depth: torch.Tensor, cam: Camera) -> tuple[torch.Tensor, torch.Tensor]:
    """Normals from central differences of a camera-depth map.

    Returns ``(normals (H, W, 3), valid (H, W) bool)``; normals face the
    camera, border pixels are invalid.
    """
    H, W = depth.shape[:2]
    dtype = depth.dtype
    o_np, d_np = camera_rays(cam)
    dirs = torch.as_tensor(d_np, dtype=dtype).reshape(H, W, 3)
    fwd = torch.as_tensor(cam.forward, dtype=dtype)
    center = torch.as_tensor(cam.center, dtype=dtype)
    pts = center + dirs * (depth.reshape(H, W, 1) / (dirs @ fwd)[..., None])
    normals = torch.zeros(H, W, 3, dtype=dtype)
    valid = torch.zeros(H, W, dtype=torch.bool)
    if H < 3 or W < 3:
        return normals, valid
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    nrm = torch.cross(dx, dy, dim=-1)
    nlen = nrm.norm(dim=-1, keepdim=True)
    inner_valid = nlen[..., 0].detach() > 1e-12
    nrm = nrm / nlen.clamp_min(1e-12)
    facing = (nrm * dirs[1:-1, 1:-1]).sum(-1, keepdim=True).detach() > 0
    nrm = torch.where(facing, -nrm, nrm)
    normals = torch.nn.functional.pad(nrm.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)
    valid = torch.nn.functional.pad(inner_valid, (1, 1, 1, 1))
    return normals, valid
