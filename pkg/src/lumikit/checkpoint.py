"""Checkpoint directory: gaussians.bin (+ .json schema), mlp.bin (+ mlp.json),
env.pfm and config.json."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .deformation import DeformationField
from .imageio import read_pfm, write_pfm
from .model import Model
from .splat import GaussianCloud

# (field, width) in record order
GAUSSIAN_LAYOUT = (
    ("means", 3), ("quats", 4), ("scales", 2), ("opacity", 1), ("color", 3),
    ("albedo", 3), ("roughness", 1), ("logit", 1),
)
RECORD_FLOATS = sum(w for _, w in GAUSSIAN_LAYOUT)


class CheckpointError(ValueError):
    pass


def save_gaussians(cloud: GaussianCloud, path) -> None:
    path = Path(path)
    t = cloud.tensors()
    cols = [t[name].detach().cpu().numpy().reshape(len(cloud), w) for name, w in GAUSSIAN_LAYOUT]
    rec = np.concatenate(cols, axis=1).astype("<f4") if len(cloud) else np.zeros((0, RECORD_FLOATS), "<f4")
    path.write_bytes(rec.tobytes())
    schema = {"count": len(cloud), "dtype": "float32-le", "record_floats": RECORD_FLOATS,
              "fields": [{"name": n, "width": w} for n, w in GAUSSIAN_LAYOUT]}
    path.with_suffix(".json").write_text(json.dumps(schema, indent=1))


def load_gaussians(path, dtype=torch.float32) -> GaussianCloud:
    path = Path(path)
    schema = json.loads(path.with_suffix(".json").read_text())
    layout = [(f["name"], f["width"]) for f in schema["fields"]]
    width = sum(w for _, w in layout)
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    if flat.size != schema["count"] * width:
        raise CheckpointError(f"{path}: {flat.size} floats, schema expects {schema['count'] * width}")
    rec = flat.reshape(schema["count"], width)
    out, off = {}, 0
    for name, w in layout:
        col = torch.from_numpy(rec[:, off:off + w].copy()).to(dtype)
        out[name] = col[:, 0] if w == 1 and name in ("opacity", "roughness", "logit") else col
        off += w
    return GaussianCloud(**out)


def save_checkpoint(model: Model, out, config: Optional[dict] = None) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_gaussians(model.cloud, out / "gaussians.bin")
    model.field.save(out / "mlp.bin", out / "mlp.json")
    written = [out / "gaussians.bin", out / "gaussians.json", out / "mlp.bin", out / "mlp.json"]
    if model.env is not None:
        write_pfm(out / "env.pfm", model.env.detach().cpu().numpy())
        written.append(out / "env.pfm")
    meta = {"gate_mode": model.gate_mode, "use_dc": model.use_dc,
            "has_materials": model.has_materials, "scene_scale": model.scene_scale}
    (out / "config.json").write_text(json.dumps({"model": meta, "train": config or {}}, indent=1))
    written.append(out / "config.json")
    return written


def load_checkpoint(path, dtype=torch.float32) -> tuple[Model, dict]:
    path = Path(path)
    if not (path / "gaussians.bin").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    cfg = json.loads((path / "config.json").read_text())
    meta = cfg.get("model", {})
    cloud = load_gaussians(path / "gaussians.bin", dtype)
    field = DeformationField.load(path / "mlp.bin", path / "mlp.json").to(dtype)
    env = None
    if (path / "env.pfm").exists():
        env = torch.as_tensor(read_pfm(path / "env.pfm").data, dtype=dtype)
    model = Model(cloud, field, env, gate_mode=meta.get("gate_mode", "learned"),
                  use_dc=meta.get("use_dc", True), has_materials=meta.get("has_materials", False),
                  scene_scale=meta.get("scene_scale", 4.0))
    return model, cfg.get("train", {})
