"""Synthetic dataset generation, on-disk layout, and splat initialisation
from the analytic surfaces."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..geometry import Camera, Rng, frame_to_quat
from ..imageio import load_cameras, read_pfm, read_pgm, save_cameras, write_pfm, write_pgm
from ..splat import GaussianCloud
from .envmaps import envmap_presets
from .oracle import reference_render
from .spec import SceneSpec


@dataclass
class SceneDataset:
    """Frames plus per-frame cameras and ground truth for one scene variant."""

    frames: np.ndarray       # (F, H, W, 3) linear RGB
    cameras: list[Camera]
    masks: np.ndarray        # (F, H, W) binary
    albedo: np.ndarray       # (F, H, W, 3)
    roughness: np.ndarray    # (F, H, W, 1)
    normal: np.ndarray       # (F, H, W, 3)
    prim: np.ndarray         # (F, H, W) primitive index, -1 on background
    env: np.ndarray          # (16, 32, 3)
    labels: dict[str, str]
    spec: Optional[SceneSpec] = None
    variant: str = "dynamic"
    static: Optional["SceneDataset"] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def times(self) -> list[float]:
        return [c.time for c in self.cameras]


def load_env(env_cfg: dict, base: Optional[Path] = None) -> np.ndarray:
    from ..imageio import read_pfm

    if "path" in env_cfg:
        p = Path(env_cfg["path"])
        if base is not None and not p.is_absolute():
            p = base / p
        return read_pfm(p).data.copy()
    kw = {k: v for k, v in env_cfg.items() if k != "preset"}
    if "texel" in kw:
        kw["texel"] = tuple(kw["texel"])
    return envmap_presets(env_cfg["preset"], **kw)


def _render_variant(spec, cams, env, quality, variant):
    frames = [reference_render(spec, c, c.time, env, quality) for c in cams]
    return SceneDataset(
        frames=np.stack([f.image for f in frames]), cameras=cams,
        masks=np.stack([f.mask for f in frames]), albedo=np.stack([f.albedo for f in frames]),
        roughness=np.stack([f.roughness for f in frames]), normal=np.stack([f.normal for f in frames]),
        prim=np.stack([f.prim for f in frames]), env=env, labels=spec.labels(), spec=spec, variant=variant,
    )


def gen_scene(spec: SceneSpec, seed: Optional[int] = None, *, quality: str = "oracle",
              with_static: bool = True, env: Optional[np.ndarray] = None) -> SceneDataset:
    """Render the dynamic variant (and a static twin at ``spec.static_time``)."""
    spec.validate()
    if seed is not None:
        spec.seed = int(seed)
    env = load_env(spec.env) if env is None else env
    cams = spec.cameras()
    ds = _render_variant(spec, cams, env, quality, "dynamic")
    if with_static:
        static_cams = [c.with_time(spec.static_time) for c in cams]
        ds.static = _render_variant(spec, static_cams, env, quality, "static")
    return ds


def save_dataset(ds: SceneDataset, root) -> list[Path]:
    """Write ``root/{dynamic,static}/...`` plus ``root/spec.json``."""
    root = Path(root)
    written = []
    variants = [ds] + ([ds.static] if ds.static is not None else [])
    for v in variants:
        base = root / v.variant
        for sub in ("frames", "masks", "gt/albedo", "gt/rough", "gt/normal", "gt/prim"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        for i in range(len(v)):
            items = [
                (base / "frames" / f"{i:04d}.pfm", lambda p: write_pfm(p, v.frames[i])),
                (base / "masks" / f"{i:04d}.pgm", lambda p: write_pgm(p, v.masks[i])),
                (base / "gt/albedo" / f"{i:04d}.pfm", lambda p: write_pfm(p, v.albedo[i])),
                (base / "gt/rough" / f"{i:04d}.pfm", lambda p: write_pfm(p, v.roughness[i])),
                (base / "gt/normal" / f"{i:04d}.pfm", lambda p: write_pfm(p, v.normal[i])),
                (base / "gt/prim" / f"{i:04d}.pfm", lambda p: write_pfm(p, v.prim[i].astype(np.float32)[..., None])),
            ]
            for path, fn in items:
                fn(path)
                written.append(path)
        save_cameras(base / "cameras.json", v.cameras)
        write_pfm(base / "gt" / "env.pfm", v.env)
        (base / "labels.json").write_text(json.dumps(v.labels, indent=1, sort_keys=True))
        written += [base / "cameras.json", base / "gt" / "env.pfm", base / "labels.json"]
    if ds.spec is not None:
        (root / "spec.json").write_text(json.dumps(ds.spec.to_json(), indent=1))
        written.append(root / "spec.json")
    return written


def load_dataset(path, variant: str = "dynamic") -> SceneDataset:
    """Load one variant. ``path`` may be the scene root or the variant dir."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    if (path / variant / "cameras.json").exists():
        root, base = path, path / variant
    elif (path / "cameras.json").exists():
        root, base = path.parent, path
        variant = path.name
    else:
        raise FileNotFoundError(f"no cameras.json under {path}")
    cams = load_cameras(base / "cameras.json")
    n = len(cams)

    def stack(sub, reader):
        return np.stack([reader(base / sub / f"{i:04d}{'.pgm' if sub == 'masks' else '.pfm'}") for i in range(n)])

    frames = stack("frames", lambda p: read_pfm(p).data)
    masks = stack("masks", read_pgm)
    albedo = stack("gt/albedo", lambda p: read_pfm(p).data)
    rough = stack("gt/rough", lambda p: read_pfm(p).data)
    normal = stack("gt/normal", lambda p: read_pfm(p).data)
    prim_dir = base / "gt/prim"
    prim = (stack("gt/prim", lambda p: read_pfm(p).data[..., 0]).astype(np.int64)
            if prim_dir.exists() else np.where(masks > 0.5, 0, -1))
    env = read_pfm(base / "gt" / "env.pfm").data
    labels = json.loads((base / "labels.json").read_text())
    spec = SceneSpec.load(root / "spec.json") if (root / "spec.json").exists() else None
    return SceneDataset(frames, cams, (masks > 0.5).astype(np.float32), albedo, rough, normal, prim,
                        env, labels, spec, variant)


# ---------------------------------------------------------------------------
# Splat initialisation from the analytic surfaces
# ---------------------------------------------------------------------------

@dataclass
class SurfaceSamples:
    cloud: GaussianCloud
    prim: np.ndarray     # (N,) primitive index
    dynamic: np.ndarray  # (N,) bool


def _grid(extent_a, extent_b, spacing):
    na = max(int(math.ceil(extent_a / spacing)), 1)
    nb = max(int(math.ceil(extent_b / spacing)), 1)
    a = ((np.arange(na) + 0.5) / na - 0.5) * extent_a
    b = ((np.arange(nb) + 0.5) / nb - 0.5) * extent_b
    A, B = np.meshgrid(a, b, indexing="ij")
    return A.ravel(), B.ravel(), extent_a / na, extent_b / nb


def init_gaussians(spec: SceneSpec, spacing: float = 0.12, *, t: Optional[float] = None,
                   rng: Optional[Rng] = None, jitter: float = 0.25, scale_factor: float = 0.6,
                   opacity: float = 0.7, color: float = 0.5, roughness: float = 0.5,
                   logit: float = 0.01, dtype=torch.float32) -> SurfaceSamples:
    """Splats on a jittered grid over every primitive surface at time ``t``.

    Downward-facing box faces are skipped (they rest on the ground). Jitter is
    tangential only, so splats stay on their surface.
    """
    t = spec.static_time if t is None else t
    rng = rng or Rng(spec.seed, 7)
    means, quats, scales, prim_ids = [], [], [], []

    def add(points, tu, tv, n, su, sv, pid):
        q = frame_to_quat(tu, tv, n)
        for p in points:
            means.append(p)
            quats.append(q)
            scales.append((su, sv))
            prim_ids.append(pid)

    for pid, p in enumerate(spec.primitives):
        c = p.center_at(t)
        if p.kind == "plane":
            a, b, da, db = _grid(p.size[0], p.size[1], spacing)
            a = a + jitter * da * rng.uniform(a.shape, -1, 1)
            b = b + jitter * db * rng.uniform(b.shape, -1, 1)
            pts = c + np.stack([a, b, np.zeros_like(a)], -1)
            add(pts, [1, 0, 0], [0, 1, 0], [0, 0, 1], scale_factor * da, scale_factor * db, pid)
        elif p.kind == "box":
            hs = np.asarray(p.half_size, float)
            for axis in range(3):
                for sgn in (-1.0, 1.0):
                    if axis == 2 and sgn < 0:
                        continue
                    n = np.zeros(3)
                    n[axis] = sgn
                    ua, va = [(axis + 1) % 3, (axis + 2) % 3]
                    tu = np.zeros(3)
                    tu[ua] = 1.0
                    tv = np.cross(n, tu)
                    a, b, da, db = _grid(2 * hs[ua], 2 * hs[va], spacing)
                    a = a + jitter * da * rng.uniform(a.shape, -1, 1) * 0.5
                    b = b + jitter * db * rng.uniform(b.shape, -1, 1) * 0.5
                    pts = np.tile(c, (a.shape[0], 1))
                    pts[:, axis] += sgn * hs[axis]
                    pts[:, ua] += a
                    pts[:, va] += b * np.sign(tv[va])
                    add(pts, tu, tv, n, scale_factor * da, scale_factor * db, pid)
        else:
            area = 4 * np.pi * p.radius ** 2
            k = max(int(area / spacing ** 2), 8)
            i = np.arange(k) + 0.5
            phi = np.arccos(1 - 2 * i / k)
            theta = np.pi * (1 + 5 ** 0.5) * i
            dirs = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)
            for d in dirs:
                tu = np.cross([0.0, 0.0, 1.0], d)
                if np.linalg.norm(tu) < 1e-6:
                    tu = np.array([1.0, 0.0, 0.0])
                tu /= np.linalg.norm(tu)
                add([c + p.radius * d], tu, np.cross(d, tu), d,
                    scale_factor * spacing, scale_factor * spacing, pid)

    n = len(means)
    cloud = GaussianCloud(
        means=torch.tensor(np.asarray(means), dtype=dtype),
        quats=torch.tensor(np.asarray(quats), dtype=dtype),
        scales=torch.tensor(np.asarray(scales), dtype=dtype),
        opacity=torch.full((n,), opacity, dtype=dtype),
        color=torch.full((n, 3), color, dtype=dtype),
        albedo=torch.full((n, 3), color, dtype=dtype),
        roughness=torch.full((n,), roughness, dtype=dtype),
        logit=torch.full((n,), logit, dtype=dtype),
    )
    prim = np.asarray(prim_ids, dtype=np.int64)
    dynamic = np.array([spec.primitives[i].motion.dynamic for i in prim], dtype=bool)
    return SurfaceSamples(cloud, prim, dynamic)
