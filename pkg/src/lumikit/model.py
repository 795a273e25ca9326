"""The trained scene: canonical splats, deformation field, environment map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .deformation import DeformationField, deform
from .geometry import Camera
from .splat import DEFAULT_SETTINGS, GaussianCloud, RenderSettings, rasterize, splat_frames


@dataclass
class Model:
    cloud: GaussianCloud
    field: DeformationField
    env: Optional[torch.Tensor] = None
    gate_mode: str = "learned"      # "learned" or "one" (always dynamic)
    use_dc: bool = True
    has_materials: bool = False
    scene_scale: float = 4.0
    extra: dict = field(default_factory=dict)

    def deformed(self, t: float, *, gate: Optional[str] = None, u=None, delta_scale: float = 1.0,
                 detach_input: bool = True) -> dict:
        if gate is None:
            gate = "one" if self.gate_mode == "one" else "inference"
        c = self.cloud
        return deform(self.field, c.means, c.quats, c.color, c.logit, t, gate=gate, u=u,
                      delta_scale=delta_scale, use_dc=self.use_dc, detach_input=detach_input)

    def render(self, cam: Camera, mode: str = "all", *, state: Optional[dict] = None,
               settings: RenderSettings = DEFAULT_SETTINGS, extra=None):
        state = self.deformed(cam.time) if state is None else state
        return rasterize(self.cloud, cam, mode, means=state["means"], quats=state["quats"],
                         colors=state["color"], settings=settings, extra=extra)

    def trace_scene(self, state: dict, radiance: Optional[torch.Tensor] = None):
        from .shading import TraceScene

        return TraceScene(state["means"], splat_frames(state["quats"]), self.cloud.scales,
                          self.cloud.opacity, radiance)

    @property
    def surface_eps(self) -> float:
        return 1e-3 * self.scene_scale

    def gate_values(self) -> np.ndarray:
        if self.gate_mode == "one":
            return np.ones(len(self.cloud))
        from .deformation import gate_inference

        return gate_inference(self.cloud.logit.detach().double()).numpy()
