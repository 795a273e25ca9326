"""Two-stage training.

Stage 1 fits canonical splats, the deformation field and the per-splat
static/dynamic gate logits to the frames. Stage 2 freezes the geometry and
fits albedo, roughness and the environment map through Monte Carlo deferred
shading, fine-tuning colours, opacity and the colour head at a tenth of their
Stage-1 learning rates.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
import torch

from .deformation import DeformationField
from .geometry import Rng
from .losses import (
    Stage1Weights, Stage2Weights, loss_delta_reg, loss_depth_distortion, loss_normal_consistency,
    loss_opacity_mask, loss_reconstruction, loss_separation, ndc_depth, total_stage1, total_stage2,
)
from .model import Model
from .optim import (
    Optimizer, ParamGroup, clamp_nonneg, clamp_scale, clamp_unit, exponential_lr, renormalize,
)
from .scenegen.dataset import SceneDataset, init_gaussians
from .shading import ENV_HEIGHT, ENV_WIDTH, shade_gbuffer

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, iteration: int, stage: int):
        super().__init__(f"non-finite loss or parameters in stage {stage} at iteration {iteration}")
        self.iteration = iteration
        self.stage = stage


@dataclass
class TrainConfig:
    stage1_iters: int = 3000
    stage2_iters: int = 2000
    stage1: Stage1Weights = field(default_factory=Stage1Weights)
    stage2: Stage2Weights = field(default_factory=Stage2Weights)
    seed: int = 0
    # Stage 1 learning rates (parameters are stored directly, not through
    # activations, so these are absolute step sizes)
    lr_means: float = 2e-4
    lr_quats: float = 1e-3
    lr_scales: float = 2e-4
    lr_opacity: float = 0.01
    lr_color: float = 0.01
    lr_logit: float = 0.02
    mlp_lr_start: float = 8e-4
    mlp_lr_end: float = 8e-5
    # Stage 2
    lr_env: float = 0.2
    lr_albedo: float = 0.01
    lr_roughness: float = 0.005
    finetune_factor: float = 0.1
    env_init: float = 0.5
    roughness_init: float = 0.5
    # model
    mlp_depth: int = 4
    mlp_width: int = 64
    init_spacing: float = 0.15
    no_gate: bool = False
    no_deltac: bool = False
    nan_check_every: int = 100
    indirect: bool = True

    def __post_init__(self):
        if self.stage1_iters <= 0 or self.stage2_iters <= 0:
            raise ValueError("iteration counts must be positive")

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        """Full-scale schedule: 35k + 20k iterations, 8x256 MLP, 512 rays."""
        base = dict(stage1_iters=35000, stage2_iters=20000, mlp_depth=8, mlp_width=256,
                    stage2=Stage2Weights(env=1e-3, pixels=512, rays=512),
                    stage1=Stage1Weights(separation_start_iter=3000, deform_warmup_iter=3000))
        base.update(kw)
        return cls(**base)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        s1 = Stage1Weights(**d.pop("stage1", {}))
        s2 = Stage2Weights(**d.pop("stage2", {}))
        return cls(stage1=s1, stage2=s2, **d)


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)   # per-iteration dicts
    dynamic: Optional[np.ndarray] = None        # ground-truth labels of the init samples
    prim: Optional[np.ndarray] = None
    seconds: float = 0.0


def _check_finite(iteration, stage, loss, tensors):
    if not torch.isfinite(loss):
        raise NumericalError(iteration, stage)
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericalError(iteration, stage)


def _frame_schedule(rng: Rng, n_frames: int, iters: int) -> np.ndarray:
    reps = iters // n_frames + 1
    return np.concatenate([rng.spawn(k).permutation(n_frames) for k in range(reps)])[:iters]


def init_model(dataset: SceneDataset, config: TrainConfig):
    if dataset.spec is None:
        raise ValueError("dataset has no scene spec; cannot initialise splats")
    torch.manual_seed(config.seed)
    samples = init_gaussians(dataset.spec, config.init_spacing, rng=Rng(config.seed, 11))
    field_ = DeformationField(config.mlp_depth, config.mlp_width)
    scale = float(dataset.spec.camera.radius)
    model = Model(samples.cloud, field_, gate_mode="one" if config.no_gate else "learned",
                  use_dc=not config.no_deltac, scene_scale=scale)
    return model, samples


def stage1_losses(model: Model, dataset: SceneDataset, frame: int, config: TrainConfig, iteration: int,
                  u=None, *, settings=None, detach_input: bool = True):
    """Forward pass of one Stage-1 iteration; returns (total, terms)."""
    from .splat import DEFAULT_SETTINGS

    cam = dataset.cameras[frame]
    w = config.stage1
    warm = iteration < w.deform_warmup_iter
    gate = "one" if model.gate_mode == "one" else ("sample" if u is not None else "inference")
    state = model.deformed(cam.time, gate=gate, u=u, delta_scale=0.0 if warm else 1.0,
                           detach_input=detach_input)
    gb = model.render(cam, "color", state=state, settings=settings or DEFAULT_SETTINGS)
    dtype = model.cloud.means.dtype
    gt = torch.as_tensor(dataset.frames[frame], dtype=dtype)
    mask = torch.as_tensor(dataset.masks[frame], dtype=dtype)
    hits = gb.hits
    terms = {
        "recon": loss_reconstruction(gb.color, gt),
        "normal": loss_normal_consistency(gb, cam),
        "distortion": loss_depth_distortion(hits.ray, ndc_depth(gb.extra["z_hit"]), hits.weight, hits.num_rays),
        "opacity": loss_opacity_mask(gb.opacity[..., 0], mask),
    }
    if model.gate_mode != "one":
        terms["separation"] = loss_separation(model.cloud.logit)
    terms["delta_c"], terms["delta_mu"] = loss_delta_reg(state["dc"], state["dmu"])
    return total_stage1(terms, w, iteration), terms


def stage1_groups(model: Model, config: TrainConfig) -> list[ParamGroup]:
    c = model.cloud
    mlp_sched = exponential_lr(config.mlp_lr_start, config.mlp_lr_end, config.stage1_iters)
    groups = [
        ParamGroup("means", [c.means], config.lr_means),
        ParamGroup("quats", [c.quats], config.lr_quats, clamp=renormalize),
        ParamGroup("scales", [c.scales], config.lr_scales, clamp=clamp_scale),
        ParamGroup("opacity", [c.opacity], config.lr_opacity, clamp=clamp_unit),
        ParamGroup("color", [c.color], config.lr_color, clamp=clamp_unit),
        ParamGroup("logit", [c.logit], config.lr_logit, frozen=model.gate_mode == "one"),
        ParamGroup("mlp", list(model.field.parameters()), config.mlp_lr_start, schedule=mlp_sched),
    ]
    return groups


def train_stage1(dataset: SceneDataset, config: TrainConfig, *, model: Optional[Model] = None,
                 progress=None) -> TrainResult:
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    t0 = time.time()
    samples = None
    if model is None:
        model, samples = init_model(dataset, config)
    c = model.cloud
    for t in c.tensors().values():
        t.requires_grad_(True)
    opt = Optimizer(stage1_groups(model, config))
    rng = Rng(config.seed, 1)
    frames = _frame_schedule(rng.spawn(0), len(dataset), config.stage1_iters)
    history = []
    n = len(c)
    for it in range(config.stage1_iters):
        u = None
        if model.gate_mode != "one":
            u = torch.as_tensor(rng.spawn(1, it).open_uniform(n), dtype=c.means.dtype)
        total, terms = stage1_losses(model, dataset, int(frames[it]), config, it, u)
        opt.zero_grad()
        total.backward()
        opt.step()
        rec = {"iter": it, "frame": int(frames[it]), "total": float(total.detach())}
        rec.update({k: float(v.detach()) for k, v in terms.items()})
        history.append(rec)
        if config.nan_check_every and (it + 1) % config.nan_check_every == 0:
            _check_finite(it, 1, total, opt.trainable())
        if progress is not None:
            progress(1, it, rec)
    for t in c.tensors().values():
        t.requires_grad_(False)
    return TrainResult(model, history,
                       None if samples is None else samples.dynamic,
                       None if samples is None else samples.prim, time.time() - t0)


def stage2_groups(model: Model, config: TrainConfig, iters1: Optional[int] = None) -> list[ParamGroup]:
    c = model.cloud
    f = config.finetune_factor
    head = model.field.heads["dc"]
    frozen_mlp = [p for n, p in model.field.named_parameters() if not n.startswith("heads.dc")]
    return [
        ParamGroup("env", [model.env], config.lr_env, clamp=clamp_nonneg),
        ParamGroup("albedo", [c.albedo], config.lr_albedo, clamp=clamp_unit),
        ParamGroup("roughness", [c.roughness], config.lr_roughness, clamp=clamp_unit),
        ParamGroup("opacity", [c.opacity], config.lr_opacity * f, clamp=clamp_unit),
        ParamGroup("color", [c.color], config.lr_color * f, clamp=clamp_unit),
        ParamGroup("dc_head", list(head.parameters()), config.mlp_lr_end * f,
                   frozen=not model.use_dc),
        ParamGroup("means", [c.means], 0.0, frozen=True),
        ParamGroup("quats", [c.quats], 0.0, frozen=True),
        ParamGroup("scales", [c.scales], 0.0, frozen=True),
        ParamGroup("logit", [c.logit], 0.0, frozen=True),
        ParamGroup("mlp_frozen", frozen_mlp, 0.0, frozen=True),
    ]


def prepare_stage2(model: Model, config: TrainConfig) -> None:
    """Albedo from canonical colour, constant roughness and env."""
    c = model.cloud
    with torch.no_grad():
        c.albedo = c.color.detach().clone()
        c.roughness = torch.full_like(c.roughness, config.roughness_init)
    model.env = torch.full((ENV_HEIGHT, ENV_WIDTH, 3), config.env_init, dtype=c.means.dtype)
    model.has_materials = True


def sample_pixels(gb, mask: np.ndarray, count: int, rng: Rng, threshold: float = 0.5) -> torch.Tensor:
    op = gb.pixels("opacity")[:, 0].detach().numpy()
    cand = np.nonzero((op > threshold) & (mask.reshape(-1) > 0.5))[0]
    if cand.size == 0:
        return torch.zeros(0, dtype=torch.long)
    take = min(count, cand.size)
    return torch.as_tensor(np.sort(cand[rng.choice(cand.size, take, replace=False)]), dtype=torch.long)


def stage2_losses(model: Model, dataset: SceneDataset, frame: int, config: TrainConfig, rng: Rng,
                  *, settings=None, detach_input: bool = True, pixels=None):
    """Forward pass of one Stage-2 iteration; returns (total, terms, extras)."""
    from .splat import DEFAULT_SETTINGS

    settings = settings or DEFAULT_SETTINGS
    cam = dataset.cameras[frame]
    state = model.deformed(cam.time, detach_input=detach_input)
    gb = model.render(cam, "all", state=state, settings=settings)
    dtype = model.cloud.means.dtype
    gt = torch.as_tensor(dataset.frames[frame], dtype=dtype)
    if pixels is None:
        pixels = sample_pixels(gb, dataset.masks[frame], config.stage2.pixels, rng.spawn(0))
    scene = model.trace_scene(state, state["color"] if config.indirect else None)
    pix, pbr = shade_gbuffer(gb, cam.center, model.env, scene, config.stage2.rays, rng.spawn(1),
                             pixels=pixels, eps=model.surface_eps, settings=settings)
    gt_pix = gt.reshape(-1, 3)[pix]
    total, terms = total_stage2(gb.color, gt, pbr, gt_pix, model.env, config.stage2)
    return total, terms, {"pixels": pix, "pbr": pbr, "gbuffer": gb}


def train_stage2(prev: TrainResult, dataset: SceneDataset, config: TrainConfig, progress=None) -> TrainResult:
    if prev is None or prev.model is None:
        raise ValueError("stage 2 needs a completed stage-1 result")
    t0 = time.time()
    model = prev.model
    prepare_stage2(model, config)
    c = model.cloud
    groups = stage2_groups(model, config)
    trainable = [p for g in groups if not g.frozen for p in g.params]
    frozen = [p for g in groups if g.frozen for p in g.params]
    for p in frozen:
        p.requires_grad_(False)
    for p in trainable:
        p.requires_grad_(True)
    snapshot = [p.detach().clone() for p in frozen]
    opt = Optimizer(groups)
    rng = Rng(config.seed, 2)
    frames = _frame_schedule(rng.spawn(0), len(dataset), config.stage2_iters)
    history = []
    for it in range(config.stage2_iters):
        total, terms, _ = stage2_losses(model, dataset, int(frames[it]), config, rng.spawn(1, it))
        opt.zero_grad()
        total.backward()
        opt.step()
        rec = {"iter": it, "frame": int(frames[it]), "total": float(total.detach())}
        rec.update({k: float(v.detach()) for k, v in terms.items()})
        history.append(rec)
        if config.nan_check_every and (it + 1) % config.nan_check_every == 0:
            _check_finite(it, 2, total, opt.trainable())
        if progress is not None:
            progress(2, it, rec)
    for p, s in zip(frozen, snapshot):
        if not torch.equal(p.detach(), s):
            raise AssertionError("a frozen stage-2 parameter changed")
    for p in trainable:
        p.requires_grad_(False)
    return TrainResult(model, prev.log + history, prev.dynamic, prev.prim, prev.seconds + time.time() - t0)


def gate_stats(model: Model, dynamic: np.ndarray) -> dict:
    """Mean inference gate over ground-truth dynamic and static splats."""
    g = model.gate_values()
    dyn = np.asarray(dynamic, bool)
    return {
        "dynamic_mean": float(g[dyn].mean()) if dyn.any() else float("nan"),
        "static_mean": float(g[~dyn].mean()) if (~dyn).any() else float("nan"),
    }
