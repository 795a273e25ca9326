"""Time-dependent deformation: MLP deltas, the Binary Concrete static/dynamic
gate, gated geometry update and multiplicative colour modulation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .geometry import ENC_MU_FREQS, ENC_T_FREQS, positional_encode, quat_normalize

GATE_TEMPERATURE = 0.5
LOGIT_FLOOR = 1e-8
HEADS = ("dmu", "dr", "dc")


class DeformationField(nn.Module):
    """MLP(enc(t), enc(mu)) -> (d_mu, d_r, d_c), ReLU trunk, linear heads."""

    def __init__(self, depth: int = 4, width: int = 64, enc_t: int = ENC_T_FREQS,
                 enc_mu: int = ENC_MU_FREQS, zero_heads: bool = True):
        super().__init__()
        self.depth, self.width, self.enc_t, self.enc_mu = depth, width, enc_t, enc_mu
        in_dim = 2 * enc_t + 6 * enc_mu
        layers = []
        for i in range(depth):
            layers.append(nn.Linear(in_dim if i == 0 else width, width))
        self.trunk = nn.ModuleList(layers)
        self.heads = nn.ModuleDict({k: nn.Linear(width, 3) for k in HEADS})
        if zero_heads:
            for head in self.heads.values():
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def encode(self, t, mu: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=mu.dtype).reshape(-1, 1).expand(mu.shape[0], 1)
        return torch.cat([positional_encode(t, self.enc_t), positional_encode(mu, self.enc_mu)], -1)

    def forward(self, t, mu: torch.Tensor):
        h = self.encode(t, mu)
        for layer in self.trunk:
            h = torch.relu(layer(h))
        return tuple(self.heads[k](h) for k in HEADS)

    def layer_shapes(self) -> list[list[int]]:
        return [list(p.shape) for p in self.parameters()]

    # Flat float32 blob + JSON header.
    def save(self, blob_path, header_path=None) -> None:
        blob_path = Path(blob_path)
        header_path = Path(header_path) if header_path else blob_path.with_suffix(".json")
        flat = np.concatenate([p.detach().cpu().numpy().astype("<f4").ravel() for p in self.parameters()])
        blob_path.write_bytes(flat.tobytes())
        header = {"layers": self.layer_shapes(), "enc_t": self.enc_t, "enc_mu": self.enc_mu,
                  "depth": self.depth, "width": self.width,
                  "names": [n for n, _ in self.named_parameters()]}
        header_path.write_text(json.dumps(header, indent=1))

    @classmethod
    def load(cls, blob_path, header_path=None) -> "DeformationField":
        blob_path = Path(blob_path)
        header_path = Path(header_path) if header_path else blob_path.with_suffix(".json")
        header = json.loads(header_path.read_text())
        field = cls(header["depth"], header["width"], header["enc_t"], header["enc_mu"])
        flat = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
        offset = 0
        with torch.no_grad():
            for p, shape in zip(field.parameters(), header["layers"]):
                n = int(np.prod(shape))
                p.copy_(torch.from_numpy(flat[offset:offset + n].copy()).reshape(shape))
                offset += n
        if offset != flat.size:
            raise ValueError(f"{blob_path}: {flat.size} floats, header describes {offset}")
        return field


def mlp_forward(field: DeformationField, t, mu: torch.Tensor):
    return field(t, mu)


def concrete_sample(logit, temperature, u):
    """Relaxed Bernoulli sample sigmoid((log|P| + log U - log(1-U)) / T)."""
    if isinstance(logit, torch.Tensor):
        u = torch.as_tensor(u, dtype=logit.dtype)
        mag = logit.abs().clamp_min(LOGIT_FLOOR)
        return torch.sigmoid((torch.log(mag) + torch.log(u) - torch.log1p(-u)) / temperature)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    mag = np.maximum(np.abs(np.asarray(logit, dtype=np.float64)), LOGIT_FLOOR)
    u = np.asarray(u, dtype=np.float64)
    z = (np.log(mag) + np.log(u) - np.log1p(-u)) / temperature
    return 1.0 / (1.0 + np.exp(-z))


def gate_inference(logit, temperature=GATE_TEMPERATURE):
    """U = 0.5 makes the noise term vanish: sigmoid(log|P| / T), evaluated
    directly so it is exact rather than off by the rounding of log(0.5)."""
    if isinstance(logit, torch.Tensor):
        return torch.sigmoid(torch.log(logit.abs().clamp_min(LOGIT_FLOOR)) / temperature)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    mag = np.maximum(np.abs(np.asarray(logit, dtype=np.float64)), LOGIT_FLOOR)
    return 1.0 / (1.0 + np.exp(-np.log(mag) / temperature))


def apply_deformation(means: torch.Tensor, quats: torch.Tensor, dmu: torch.Tensor,
                      dr: torch.Tensor, gate: torch.Tensor):
    """mu' = mu + g * d_mu; q' = normalize(q + g * (0, d_r)). Scales and
    opacity are never touched."""
    g = gate.reshape(-1, 1)
    means2 = means + g * dmu
    dq = torch.cat([torch.zeros_like(dr[:, :1]), g * dr], dim=-1)
    return means2, quat_normalize(quats + dq)


def modulate_color(color: torch.Tensor, dc: torch.Tensor) -> torch.Tensor:
    return (color * (1.0 - dc)).clamp(0.0, 1.0)


def deform(field: Optional[DeformationField], means, quats, color, logit, t, *,
           gate: str = "inference", u=None, temperature: float = GATE_TEMPERATURE,
           delta_scale: float = 1.0, use_dc: bool = True, detach_input: bool = True):
    """Full per-timestep deformation of a cloud.

    ``gate`` is ``"inference"`` (U = 0.5), ``"sample"`` (``u`` draws),
    ``"one"`` (always dynamic) or ``"zero"``. Returns a dict with deformed
    means/quats/colors plus the raw deltas and gate values. The MLP sees a
    detached copy of the canonical centers unless ``detach_input`` is off.
    """
    n = means.shape[0]
    if field is None:
        z = means.new_zeros(n, 3)
        dmu = dr = dc = z
    else:
        dmu, dr, dc = field(t, means.detach() if detach_input else means)
        dmu, dr, dc = dmu * delta_scale, dr * delta_scale, dc * delta_scale
    if not use_dc:
        dc = torch.zeros_like(dc)
    if gate == "inference":
        g = gate_inference(logit, temperature)
    elif gate == "sample":
        g = concrete_sample(logit, temperature, u)
    elif gate == "one":
        g = torch.ones_like(logit)
    elif gate == "zero":
        g = torch.zeros_like(logit)
    else:
        raise ValueError(f"unknown gate mode {gate!r}")
    m2, q2 = apply_deformation(means, quats, dmu, dr, g)
    return {"means": m2, "quats": q2, "color": modulate_color(color, dc),
            "dmu": dmu, "dr": dr, "dc": dc, "gate": g}
