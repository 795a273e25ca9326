"""Brute-force reference renderer over analytic primitives.

Independent of the splat pipeline: own intersection code, own BRDF code and
deterministic quadrature instead of Monte Carlo. Direct light integrates the
environment over a 64 x 256 (theta, phi) grid; one diffuse bounce uses a
coarser grid and a per-frame irradiance cache on the primitive surfaces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import Camera, camera_rays
from .spec import Primitive, SceneSpec

F0 = 0.04
QUALITY = {
    # name: (direct grid rows, cols), (bounce grid rows, cols), cache resolution
    "oracle": ((64, 256), (16, 64), 48),
    "fast": ((32, 128), (12, 48), 32),
}
SURFACE_EPS = 1e-4


# ---------------------------------------------------------------------------
# Quadrature grids and env lookup
# ---------------------------------------------------------------------------

def sphere_grid(rows: int, cols: int):
    """Cell-centre directions and solid angles of a (theta, phi) grid."""
    dt, dp = np.pi / rows, 2 * np.pi / cols
    th = (np.arange(rows) + 0.5) * dt
    ph = (np.arange(cols) + 0.5) * dp
    T, P = np.meshgrid(th, ph, indexing="ij")
    dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
    # exact cell areas: dphi * (cos(theta0) - cos(theta1))
    edges = np.arange(rows + 1) * dt
    band = (np.cos(edges[:-1]) - np.cos(edges[1:])) * dp
    area = np.repeat(band, cols)
    return dirs, area


def env_radiance(env: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    h, w = env.shape[:2]
    theta = np.arccos(np.clip(dirs[..., 2], -1, 1))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0]) % (2 * np.pi)
    r = np.minimum((theta * h / np.pi).astype(int), h - 1)
    c = np.minimum((phi * w / (2 * np.pi)).astype(int), w - 1)
    return env[r, c].astype(np.float64)


# ---------------------------------------------------------------------------
# BRDF (same model as the shading module, written in the V-term form)
# ---------------------------------------------------------------------------

def reference_brdf(albedo, roughness, n, wi, wo, specular=True):
    """Lambert + GGX with the height-correlated Smith visibility term
    V = G / (4 NoL NoV). Shapes broadcast; returns (..., 3)."""
    albedo = np.asarray(albedo, dtype=np.float64)
    nol = np.sum(n * wi, -1)
    nov = np.sum(n * wo, -1)
    out = np.broadcast_to(albedo / np.pi, np.broadcast_shapes(albedo.shape, nol.shape + (3,))).copy()
    if not specular:
        return out
    a = np.asarray(roughness, dtype=np.float64) ** 2
    a2 = np.maximum(a * a, 1e-8)
    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    noh = np.clip(np.sum(n * h, -1), 0, 1)
    voh = np.clip(np.sum(wo * h, -1), 0, 1)
    k = (noh * a2 - noh) * noh + 1.0
    d = a2 / (np.pi * k * k)
    nl = np.maximum(nol, 1e-6)
    nv = np.maximum(nov, 1e-6)
    vis = 0.5 / (nl * np.sqrt(nv * nv * (1 - a2) + a2) + nv * np.sqrt(nl * nl * (1 - a2) + a2))
    fres = F0 + (1 - F0) * (1 - voh) ** 5
    spec = np.where((nol > 0) & (nov > 0), d * vis * fres, 0.0)
    return out + spec[..., None]


# ---------------------------------------------------------------------------
# Analytic intersection
# ---------------------------------------------------------------------------

@dataclass
class PlacedPrimitive:
    prim: Primitive
    center: np.ndarray

    def intersect(self, o, d, tmin=1e-6):
        """Distances (inf on miss) and outward normals for rays (K, 3)."""
        p = self.prim
        k = o.shape[0]
        t = np.full(k, np.inf)
        nrm = np.zeros((k, 3))
        if p.kind == "plane":
            dz = d[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                tt = (self.center[2] - o[:, 2]) / dz
            x = o[:, 0] + tt * d[:, 0]
            y = o[:, 1] + tt * d[:, 1]
            ok = (np.abs(dz) > 1e-12) & (tt > tmin)
            ok &= (np.abs(x - self.center[0]) <= p.size[0] / 2) & (np.abs(y - self.center[1]) <= p.size[1] / 2)
            t[ok] = tt[ok]
            nrm[:, 2] = 1.0
        elif p.kind == "box":
            hs = np.asarray(p.half_size, float)
            lo, hi = self.center - hs, self.center + hs
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t0 = (lo - o) * inv
                t1 = (hi - o) * inv
            tnear = np.nanmax(np.minimum(t0, t1), axis=1)
            tfar = np.nanmin(np.maximum(t0, t1), axis=1)
            ok = (tnear <= tfar) & (tnear > tmin)
            t[ok] = tnear[ok]
            pts = o + np.where(np.isfinite(t), t, 0)[:, None] * d
            rel = (pts - self.center) / hs
            axis = np.argmax(np.abs(rel), axis=1)
            nrm[np.arange(k), axis] = np.sign(rel[np.arange(k), axis])
        elif p.kind == "sphere":
            oc = o - self.center
            b = np.sum(oc * d, 1)
            c = np.sum(oc * oc, 1) - p.radius ** 2
            disc = b * b - c
            sq = np.sqrt(np.maximum(disc, 0))
            t0, t1 = -b - sq, -b + sq
            tt = np.where(t0 > tmin, t0, t1)
            ok = (disc >= 0) & (tt > tmin)
            t[ok] = tt[ok]
            pts = o + np.where(np.isfinite(t), t, 0)[:, None] * d
            nrm = (pts - self.center) / p.radius
        return t, nrm


def place(spec: SceneSpec, t: float) -> list[PlacedPrimitive]:
    return [PlacedPrimitive(p, p.center_at(t)) for p in spec.primitives]


def first_hit(placed, o, d, tmin=1e-6):
    """Nearest hit over all primitives: (t, primitive index or -1, normal)."""
    k = o.shape[0]
    best = np.full(k, np.inf)
    idx = np.full(k, -1)
    nrm = np.zeros((k, 3))
    for i, pp in enumerate(placed):
        t, n = pp.intersect(o, d, tmin)
        closer = t < best
        best[closer] = t[closer]
        idx[closer] = i
        nrm[closer] = n[closer]
    return best, idx, nrm


def _face_normals(nrm, d):
    """Flip normals to face against the incoming ray (two-sided planes)."""
    flip = np.sum(nrm * d, -1) > 0
    nrm = nrm.copy()
    nrm[flip] *= -1
    return nrm


# ---------------------------------------------------------------------------
# Irradiance cache for the single diffuse bounce
# ---------------------------------------------------------------------------

class IrradianceCache:
    """Direct irradiance tabulated on each primitive surface (nearest lookup)."""

    def __init__(self, placed, env, grid_rc, res: int, fine_rc=None, max_fine: int = 2048):
        self.placed = placed
        self.res = res
        dirs, area = sphere_grid(*grid_rc)
        rad = env_radiance(env, dirs)
        lit = rad.sum(-1) > 0
        if fine_rc is not None:
            # sparse maps (a few hot texels) are integrated on the fine grid
            fd, fa = sphere_grid(*fine_rc)
            fr = env_radiance(env, fd)
            flit = fr.sum(-1) > 0
            if flit.sum() <= max_fine:
                dirs, area, rad, lit = fd, fa, fr, flit
        self.dirs, self.area, self.rad = dirs[lit], area[lit], rad[lit]
        self.tables = [self._build(i, pp) for i, pp in enumerate(placed)]
        self.trees = [cKDTree(np.concatenate([pts, 10.0 * nrm], -1)) for pts, nrm, _ in self.tables]

    def _points(self, pp):
        p, r = pp.prim, self.res
        if p.kind == "plane":
            u = (np.arange(r) + 0.5) / r - 0.5
            X, Y = np.meshgrid(u * p.size[0], u * p.size[1], indexing="ij")
            pts = np.stack([X.ravel(), Y.ravel(), np.zeros(r * r)], -1) + pp.center
            nrm = np.tile([0.0, 0.0, 1.0], (r * r, 1))
            return pts, nrm
        if p.kind == "box":
            m = max(r // 6, 4)
            hs = np.asarray(p.half_size, float)
            u = (np.arange(m) + 0.5) / m * 2 - 1
            A, B = np.meshgrid(u, u, indexing="ij")
            pts, nrm = [], []
            for axis in range(3):
                for sgn in (-1.0, 1.0):
                    q = np.zeros((m * m, 3))
                    others = [a for a in range(3) if a != axis]
                    q[:, axis] = sgn
                    q[:, others[0]] = A.ravel()
                    q[:, others[1]] = B.ravel()
                    pts.append(pp.center + q * hs)
                    n = np.zeros((m * m, 3))
                    n[:, axis] = sgn
                    nrm.append(n)
            return np.concatenate(pts), np.concatenate(nrm)
        m = max(r // 3, 8)
        th = (np.arange(m) + 0.5) * np.pi / m
        ph = (np.arange(2 * m) + 0.5) * np.pi / m
        T, P = np.meshgrid(th, ph, indexing="ij")
        n = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
        return pp.center + p.radius * n, n

    def _build(self, i, pp):
        pts, nrm = self._points(pp)
        irr = np.zeros((pts.shape[0], 3))
        if self.dirs.shape[0]:
            for s in range(0, pts.shape[0], 256):
                P, N = pts[s:s + 256], nrm[s:s + 256]
                cos = np.clip(N @ self.dirs.T, 0, None)  # (p, D)
                o = np.repeat(P + SURFACE_EPS * N, self.dirs.shape[0], 0)
                d = np.tile(self.dirs, (P.shape[0], 1))
                t, _, _ = first_hit(self.placed, o, d)
                vis = (~np.isfinite(t)).reshape(P.shape[0], -1)
                irr[s:s + 256] = (cos * vis * self.area) @ self.rad
        return pts, nrm, irr

    def lookup(self, prim_idx, points, normals) -> np.ndarray:
        out = np.zeros((points.shape[0], 3))
        for i, (pts, nrm, irr) in enumerate(self.tables):
            sel = prim_idx == i
            if not sel.any():
                continue
            # nearest cache point, normals weighted so faces never mix
            query = np.concatenate([points[sel], 10.0 * normals[sel]], -1)
            _, j = self.trees[i].query(query)
            out[sel] = irr[j]
        return out


# ---------------------------------------------------------------------------
# Reference frame rendering
# ---------------------------------------------------------------------------

@dataclass
class ReferenceFrame:
    image: np.ndarray      # (H, W, 3) linear radiance
    mask: np.ndarray       # (H, W) 0/1
    albedo: np.ndarray     # (H, W, 3)
    roughness: np.ndarray  # (H, W, 1)
    normal: np.ndarray     # (H, W, 3) world space, zero on background
    depth: np.ndarray      # (H, W, 1) camera z
    prim: np.ndarray       # (H, W) primitive index or -1


def reference_render(spec: SceneSpec, cam: Camera, t: float, env: np.ndarray,
                     quality: str = "oracle", *, indirect: bool = True,
                     specular: bool = True, chunk: int = 64) -> ReferenceFrame:
    """Render one frame of ``spec`` at time ``t`` by deterministic quadrature."""
    direct_rc, bounce_rc, cache_res = QUALITY[quality]
    placed = place(spec, t)
    o, d = camera_rays(cam)
    H, W = cam.height, cam.width
    t_hit, pidx, nrm = first_hit(placed, o, d)
    hit = pidx >= 0
    nrm = _face_normals(nrm, d)
    x = o + np.where(hit, t_hit, 0)[:, None] * d
    wo = -d

    albedo = np.zeros((H * W, 3))
    rough = np.zeros(H * W)
    for i, pp in enumerate(placed):
        albedo[pidx == i] = pp.prim.albedo
        rough[pidx == i] = pp.prim.roughness

    dirs_f, area_f = sphere_grid(*direct_rc)
    rad_f = env_radiance(env, dirs_f)
    lit = rad_f.sum(-1) > 0
    dirs_f, area_f, rad_f = dirs_f[lit], area_f[lit], rad_f[lit]
    dirs_b, area_b = sphere_grid(*bounce_rc)
    cache = IrradianceCache(placed, env, bounce_rc, cache_res, direct_rc) if indirect else None
    albedo_by_prim = np.array([pp.prim.albedo for pp in placed], dtype=np.float64)

    color = np.zeros((H * W, 3))
    ids = np.nonzero(hit)[0]
    for s in range(0, ids.shape[0], chunk):
        sel = ids[s:s + chunk]
        P, N, V = x[sel], nrm[sel], wo[sel]
        rho, a = albedo[sel], rough[sel]
        origin = P + SURFACE_EPS * N
        # direct environment light
        if dirs_f.shape[0]:
            cos = N @ dirs_f.T
            up = cos > 0
            pi_, di_ = np.nonzero(up)
            tt, _, _ = first_hit(placed, origin[pi_], dirs_f[di_])
            vis = ~np.isfinite(tt)
            f = reference_brdf(rho[pi_], a[pi_], N[pi_], dirs_f[di_], V[pi_], specular)
            contrib = f * (rad_f[di_] * (vis * cos[pi_, di_] * area_f[di_])[:, None])
            np.add.at(color, sel[pi_], contrib)
        # one diffuse bounce
        if cache is not None:
            cos = N @ dirs_b.T
            pi_, di_ = np.nonzero(cos > 0)
            tt, hp, hn = first_hit(placed, origin[pi_], dirs_b[di_])
            got = np.isfinite(tt)
            if got.any():
                pi2, di2 = pi_[got], di_[got]
                hpts = origin[pi2] + tt[got][:, None] * dirs_b[di2]
                hnrm = _face_normals(hn[got], dirs_b[di2])
                e = cache.lookup(hp[got], hpts, hnrm)
                l_ind = albedo_by_prim[hp[got]] / np.pi * e
                f = reference_brdf(rho[pi2], a[pi2], N[pi2], dirs_b[di2], V[pi2], specular)
                contrib = f * l_ind * (cos[pi2, di2] * area_b[di2])[:, None]
                np.add.at(color, sel[pi2], contrib)

    fwd = cam.forward
    depth = np.where(hit, t_hit * (d @ fwd), 0.0)
    return ReferenceFrame(
        image=color.reshape(H, W, 3).astype(np.float32),
        mask=hit.reshape(H, W).astype(np.float32),
        albedo=albedo.reshape(H, W, 3).astype(np.float32),
        roughness=rough.reshape(H, W, 1).astype(np.float32),
        normal=np.where(hit[:, None], nrm, 0).reshape(H, W, 3).astype(np.float32),
        depth=depth.reshape(H, W, 1).astype(np.float32),
        prim=pidx.reshape(H, W),
    )
