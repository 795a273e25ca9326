"""Evaluation of trained models against a generated dataset's ground truth."""

from __future__ import annotations

import numpy as np
import torch

from .model import Model
from .scenegen.dataset import SceneDataset
from .scenegen.metrics import channel_scale, texel_distance


@torch.no_grad()
def albedo_maps(model: Model, dataset: SceneDataset) -> np.ndarray:
    """Opacity-normalised albedo G-buffer for every frame, (F, H, W, 3)."""
    out = []
    for cam in dataset.cameras:
        gb = model.render(cam, "gbuffer")
        out.append((gb.albedo / gb.opacity.clamp_min(1e-6)).numpy())
    return np.stack(out)


def albedo_mse(model: Model, dataset: SceneDataset, aligned: bool = True) -> float:
    """Albedo MSE over all foreground pixels of all frames; ``aligned``
    first applies one least-squares scale per channel."""
    pred = albedo_maps(model, dataset).astype(np.float64)
    gt = dataset.albedo.astype(np.float64)
    m = dataset.masks > 0.5
    if aligned:
        pred = pred * channel_scale(pred, gt, m)
    return float(((pred - gt)[m] ** 2).mean())


def env_texel_error(model: Model, dataset: SceneDataset) -> int:
    """Chebyshev texel distance between recovered and true dominant light."""
    if model.env is None:
        raise ValueError("model has no environment map")
    return texel_distance(model.env.detach().numpy(), dataset.env)
