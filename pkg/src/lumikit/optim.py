"""Parameter registry and Adam with per-group learning rates, freezing and
post-step clamping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


@dataclass
class ParamGroup:
    name: str
    params: list
    lr: float
    frozen: bool = False
    clamp: Optional[Callable[[torch.Tensor], None]] = None
    schedule: Optional[Callable[[int], float]] = None  # iteration -> lr

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"{self.name}: learning rate must be >= 0")


def exponential_lr(start: float, end: float, steps: int) -> Callable[[int], float]:
    """log-linear decay from ``start`` to ``end`` over ``steps`` iterations."""
    def lr(it: int) -> float:
        frac = min(max(it / max(steps, 1), 0.0), 1.0)
        return math.exp(math.log(start) * (1 - frac) + math.log(end) * frac)
    return lr


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[torch.Tensor], grads: list[Optional[torch.Tensor]], state: AdamState, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update in place. Missing gradients count as zero."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.get(i)
            v = state.v.get(i)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            state.m[i], state.v[i] = m, v
            p.addcdiv_(m / c1, (v / c2).sqrt_().add_(eps), value=-lr)


class Optimizer:
    """Adam over named groups; frozen groups are never touched."""

    def __init__(self, groups: list[ParamGroup]):
        self.groups = {g.name: g for g in groups}
        self.states = {g.name: AdamState() for g in groups}
        self.iteration = 0

    def trainable(self) -> list[torch.Tensor]:
        return [p for g in self.groups.values() if not g.frozen for p in g.params]

    def zero_grad(self) -> None:
        for g in self.groups.values():
            for p in g.params:
                p.grad = None

    def lr(self, name: str) -> float:
        g = self.groups[name]
        return g.schedule(self.iteration) if g.schedule else g.lr

    def step(self) -> None:
        for name, g in self.groups.items():
            if g.frozen:
                continue
            adam_step(g.params, [p.grad for p in g.params], self.states[name], self.lr(name))
            if g.clamp is not None:
                with torch.no_grad():
                    for p in g.params:
                        g.clamp(p)
        self.iteration += 1


def clamp_unit(p: torch.Tensor) -> None:
    p.clamp_(0.0, 1.0)


def clamp_nonneg(p: torch.Tensor) -> None:
    p.clamp_(min=0.0)


def clamp_scale(p: torch.Tensor, min_scale: float = 1e-4) -> None:
    p.clamp_(min=min_scale)


def renormalize(p: torch.Tensor) -> None:
    p.div_(p.norm(dim=-1, keepdim=True).clamp_min(1e-12))
