"""Command-line entry point: gen-scene, train, relight, eval, render-maps.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("lumikit")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    input_hash: str
    start: float
    end: float = 0.0
    outputs: list = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, default=str)


def content_hash(paths) -> str:
    """sha256 over (relative name, bytes) of every file under ``paths``."""
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            rel = f.relative_to(p) if p.is_dir() else Path(f.name)
            h.update(str(rel).encode())
            h.update(b"\0")
            h.update(f.read_bytes())
    return h.hexdigest()


def _exists(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _set_threads(n: Optional[int]) -> None:
    if n is None:
        env = os.environ.get("LUMIKIT_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be >= 1")
        torch.set_num_threads(n)


def _load_cameras(path, t: Optional[float], frame: int):
    from .imageio import load_cameras

    cams = load_cameras(_exists(path, "camera file"))
    if not cams:
        raise UsageError(f"{path}: no cameras")
    if not 0 <= frame < len(cams):
        raise UsageError(f"--frame {frame} out of range (0..{len(cams) - 1})")
    cam = cams[frame]
    if t is not None:
        if not 0.0 <= t <= 1.0:
            raise UsageError("--t must lie in [0, 1]")
        cam = cam.with_time(t)
    return cam


def _load_ckpt(path):
    from .checkpoint import load_checkpoint

    p = Path(path)
    if not (p / "gaussians.bin").exists():
        raise UsageError(f"checkpoint not found: {p}")
    return load_checkpoint(p)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_scene(args, manifest: RunManifest) -> None:
    from .scenegen import SceneSpec, SpecError, gen_scene, save_dataset
    from .scenegen.spec import bundled_spec_path

    spec_path = Path(args.spec)
    if not spec_path.exists():
        try:
            spec_path = bundled_spec_path(Path(args.spec).stem)
        except FileNotFoundError:
            raise UsageError(f"spec file not found: {args.spec}") from None
    try:
        spec = SceneSpec.load(spec_path)
        manifest.input_hash = content_hash([spec_path])
        ds = gen_scene(spec, args.seed, quality=args.quality, with_static=not args.no_static)
    except SpecError as e:
        raise UsageError(f"invalid spec {spec_path}: {e}") from None
    manifest.seed = spec.seed
    manifest.config = {"spec": spec.to_json(), "quality": args.quality}
    manifest.outputs = [str(p) for p in save_dataset(ds, args.out)]


def _train_config(args):
    from .train import TrainConfig

    base = {}
    if args.config:
        base = json.loads(_exists(args.config, "config file").read_text())
    cfg = TrainConfig.paper_scale() if args.paper_scale else TrainConfig()
    if base:
        merged = cfg.to_json()
        for k, v in base.items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k].update(v)
            else:
                merged[k] = v
        cfg = TrainConfig.from_json(merged)
    s1 = cfg.stage1
    if args.sep_weight is not None:
        s1.separation = args.sep_weight
    if args.sep_start is not None:
        s1.separation_start_iter = args.sep_start
    for flag, attr in (("stage1_iters", "stage1_iters"), ("stage2_iters", "stage2_iters"), ("seed", "seed"),
                       ("rays", None), ("pixels", None)):
        v = getattr(args, flag)
        if v is None:
            continue
        if attr:
            setattr(cfg, attr, v)
        else:
            setattr(cfg.stage2, flag, v)
    if args.no_gate:
        cfg.no_gate = True
    if args.no_deltac:
        cfg.no_deltac = True
    cfg.__post_init__()
    return cfg


def write_loss_csv(path, records: list[dict]) -> None:
    keys = ["stage", "iter"] + sorted({k for r in records for k in r} - {"stage", "iter", "total"}) + ["total"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys, restval="")
        w.writeheader()
        for r in records:
            w.writerow(r)


def cmd_train(args, manifest: RunManifest) -> None:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .scenegen import load_dataset
    from .train import TrainResult, train_stage1, train_stage2

    data = _exists(args.data, "dataset")
    try:
        cfg = _train_config(args)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad training config: {e}") from None
    ds = load_dataset(data, args.variant)
    if ds.spec is None and args.stage in ("1", "both"):
        raise UsageError(f"{data}: spec.json missing; needed to initialise splats")
    manifest.seed = cfg.seed
    manifest.config = cfg.to_json()
    manifest.input_hash = content_hash([data])
    out = Path(args.out)
    records: list[dict] = []

    def progress(stage, it, rec):
        records.append({"stage": stage, **rec})
        if args.verbose and it % 100 == 0:
            log.info("stage %d iter %d total %.5f", stage, it, rec["total"])

    if args.stage in ("1", "both"):
        result = train_stage1(ds, cfg, progress=progress)
        if result.dynamic is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "init_labels.json").write_text(json.dumps(
                {"dynamic": result.dynamic.astype(int).tolist(), "prim": result.prim.tolist()}))
    else:
        init = Path(args.init) if args.init else out
        model, _ = _load_ckpt(init)
        result = TrainResult(model)
        if init != out and (init / "init_labels.json").exists():
            out.mkdir(parents=True, exist_ok=True)
            (out / "init_labels.json").write_bytes((init / "init_labels.json").read_bytes())
    if args.stage in ("2", "both"):
        result = train_stage2(result, ds, cfg, progress=progress)
    written = save_checkpoint(result.model, out, cfg.to_json())
    write_loss_csv(out / "loss.csv", records)
    manifest.outputs = [str(p) for p in written] + [str(out / "loss.csv")]


def _write_image(path: Path, img: np.ndarray, *, srgb: bool = True) -> list[str]:
    from .imageio import write_pfm, write_ppm

    path.parent.mkdir(parents=True, exist_ok=True)
    write_pfm(path, img.astype(np.float32))
    write_ppm(path.with_suffix(".ppm"), img, encode_srgb=srgb)
    return [str(path), str(path.with_suffix(".ppm"))]


def cmd_relight(args, manifest: RunManifest) -> None:
    from .imageio import read_pfm
    from .shading import relight, rotate_env

    model, _ = _load_ckpt(args.ckpt)
    env = read_pfm(_exists(args.env, "environment map")).data
    if env.shape[-1] != 3:
        raise UsageError(f"{args.env}: expected an RGB environment map")
    if args.env_rotation:
        env = rotate_env(env, args.env_rotation)
    cam = _load_cameras(args.cam, args.t, args.frame)
    if args.rays < 1:
        raise UsageError("--rays must be >= 1")
    try:
        img = relight(model, cam, env, args.rays, seed=args.seed, indirect=args.indirect)
    except ValueError as e:
        raise UsageError(str(e)) from None
    manifest.seed = args.seed
    manifest.config = {"rays": args.rays, "t": cam.time, "indirect": args.indirect,
                       "env_rotation": args.env_rotation, "frame": args.frame}
    manifest.input_hash = content_hash([args.ckpt, args.env, args.cam])
    manifest.outputs = _write_image(Path(args.out), img.numpy())


def cmd_render_maps(args, manifest: RunManifest) -> None:
    from .deformation import gate_inference

    model, _ = _load_ckpt(args.ckpt)
    cam = _load_cameras(args.cam, args.t, args.frame)
    out = Path(args.out)
    with torch.no_grad():
        c = model.cloud
        gate = torch.ones_like(c.logit) if model.gate_mode == "one" else gate_inference(c.logit)
        gb = model.render(cam, "gbuffer", extra={"gate": gate[:, None]})
        op = gb.opacity.clamp_min(1e-6)
        cov = (gb.opacity > 1e-6).to(op.dtype)
        maps = {
            "albedo": gb.albedo / op * cov,
            "roughness": gb.roughness / op * cov,
            "depth": gb.depth / op * cov,
            "separation": gb.extra["gate"] / op * cov,
            "opacity": gb.opacity,
        }
    written = []
    for name, m in maps.items():
        written += _write_image(out / f"{name}.pfm", m.numpy())
    n = gb.normal.numpy()
    from .imageio import write_pfm, write_ppm

    write_pfm(out / "normal.pfm", n.astype(np.float32))
    write_ppm(out / "normal.ppm", (n + 1.0) / 2.0, encode_srgb=False)
    written += [str(out / "normal.pfm"), str(out / "normal.ppm")]
    manifest.config = {"t": cam.time, "frame": args.frame}
    manifest.input_hash = content_hash([args.ckpt, args.cam])
    manifest.outputs = written


def _image_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    files = sorted(path.glob("*.pfm"))
    if not files:
        raise UsageError(f"no .pfm files in {path}")
    return files


def aggregate(values: list[dict]) -> dict:
    out = {}
    keys = [k for k, v in values[0].items() if isinstance(v, (int, float))]
    for k in keys:
        arr = np.asarray([v[k] for v in values], dtype=np.float64)
        out[k] = {"mean": float(arr.mean()), "std": float(arr.std())}
    return out


def cmd_eval(args, manifest: RunManifest) -> None:
    from .imageio import read_pfm, read_pgm
    from .scenegen import eval_metrics

    pred_dir, gt_dir = _exists(args.pred, "prediction"), _exists(args.gt, "ground truth")
    if args.kind == "envmap":
        pf = pred_dir / "env.pfm" if pred_dir.is_dir() else pred_dir
        gf = gt_dir / "env.pfm" if gt_dir.is_dir() else gt_dir
        pairs = [(_exists(pf, "prediction"), _exists(gf, "ground truth"))]
    else:
        preds, gts = _image_files(pred_dir), _image_files(gt_dir)
        if len(preds) != len(gts):
            raise UsageError(f"{len(preds)} predictions vs {len(gts)} ground-truth images")
        pairs = list(zip(preds, gts))
    masks = None
    if args.mask:
        masks = sorted(_exists(args.mask, "mask directory").glob("*.pgm"))
        if len(masks) != len(pairs):
            raise UsageError("mask count does not match image count")
    per_frame = []
    for i, (p, g) in enumerate(pairs):
        a, b = read_pfm(p).data, read_pfm(g).data
        if a.shape[-1] == 1 and args.kind != "roughness":
            a, b = a[..., 0], b[..., 0]
        try:
            rec = eval_metrics(a, b, args.kind, None if masks is None else read_pgm(masks[i]) > 127)
        except ValueError as e:
            raise UsageError(f"{p.name}: {e}") from None
        per_frame.append({"file": p.name, **rec})
    result = {"kind": args.kind, "frames": per_frame, "aggregate": aggregate(per_frame)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=1))
    manifest.config = {"kind": args.kind}
    manifest.input_hash = content_hash([pred_dir, gt_dir])
    manifest.outputs = [str(out)]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lumikit", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap torch worker threads")
    p.add_argument("--manifest", default=None, help="also write the run manifest here")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="render a synthetic dataset from a scene spec")
    g.add_argument("--spec", required=True, help="spec JSON path or bundled spec name")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--quality", choices=("oracle", "fast"), default="oracle")
    g.add_argument("--no-static", action="store_true", help="skip the static variant")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--init", default=None, help="stage-1 checkpoint for --stage 2")
    t.add_argument("--variant", choices=("dynamic", "static"), default="dynamic")
    t.add_argument("--config", default=None, help="JSON TrainConfig; flags win")
    t.add_argument("--paper-scale", action="store_true")
    t.add_argument("--sep-weight", type=float, default=None)
    t.add_argument("--sep-start", type=int, default=None)
    t.add_argument("--no-gate", action="store_true")
    t.add_argument("--no-deltac", action="store_true")
    t.add_argument("--stage1-iters", type=int, default=None)
    t.add_argument("--stage2-iters", type=int, default=None)
    t.add_argument("--rays", type=int, default=None)
    t.add_argument("--pixels", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("relight", help="shade a trained model under a new environment map")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--env", required=True)
    r.add_argument("--cam", required=True)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--t", type=float, default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--rays", type=int, default=256)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--indirect", choices=("pbr", "stage1", "off"), default="pbr")
    r.add_argument("--env-rotation", type=float, default=0.0, help="azimuthal rotation in degrees")
    r.set_defaults(func=cmd_relight)

    e = sub.add_parser("eval", help="image / material / envmap metrics")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--kind", choices=("image", "albedo", "relight", "roughness", "envmap"), required=True)
    e.add_argument("--mask", default=None, help="directory of .pgm foreground masks")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("render-maps", help="albedo / roughness / normal / depth / separation maps")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--cam", required=True)
    m.add_argument("--frame", type=int, default=0)
    m.add_argument("--t", type=float, default=None)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_render_maps)
    return p


def main(argv=None) -> int:
    from .train import NumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    manifest = RunManifest(command=args.command, config={}, seed=getattr(args, "seed", None),
                           input_hash="", start=time.time())
    try:
        _set_threads(args.threads)
        args.func(args, manifest)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    manifest.end = time.time()
    text = manifest.to_json()
    print(text)
    if args.manifest:
        Path(args.manifest).write_text(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
