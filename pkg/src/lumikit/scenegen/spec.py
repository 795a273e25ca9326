"""Scene descriptions: analytic primitives, motion tracks, camera orbit."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..geometry import Camera


class SpecError(ValueError):
    """Invalid scene description; the message starts with the field name."""


@dataclass
class Motion:
    kind: str = "static"          # static | linear | oscillation
    start: tuple = (0.0, 0.0, 0.0)
    end: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    frequency: float = 1.0
    phase: float = 0.0

    def offset(self, t: float) -> np.ndarray:
        if self.kind == "static":
            return np.zeros(3)
        if self.kind == "linear":
            s, e = np.asarray(self.start, float), np.asarray(self.end, float)
            return s + t * (e - s)
        if self.kind == "oscillation":
            return np.asarray(self.amplitude, float) * math.sin(2 * math.pi * self.frequency * t + self.phase)
        raise SpecError(f"motion.kind: unknown motion {self.kind!r}")

    @property
    def dynamic(self) -> bool:
        return self.kind != "static"


@dataclass
class Primitive:
    name: str
    kind: str                              # plane | box | sphere
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (4.0, 4.0)               # plane extent (x, y)
    half_size: tuple = (0.5, 0.5, 0.5)     # box
    radius: float = 0.5                    # sphere
    albedo: tuple = (0.5, 0.5, 0.5)
    roughness: float = 0.5
    motion: Motion = field(default_factory=Motion)

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, float) + self.motion.offset(t)


@dataclass
class OrbitCameras:
    radius: float = 6.0
    elevation_deg: float = 35.0
    azimuth_start_deg: float = 0.0
    azimuth_span_deg: float = 360.0
    fov_deg: float = 40.0
    target: tuple = (0.0, 0.0, 0.0)


@dataclass
class SceneSpec:
    name: str = "scene"
    primitives: list = field(default_factory=list)
    env: dict = field(default_factory=lambda: {"preset": "uniform"})
    frames: int = 1
    camera: OrbitCameras = field(default_factory=OrbitCameras)
    image_size: tuple = (64, 64)
    static_time: float = 0.5
    seed: int = 0

    def validate(self) -> "SceneSpec":
        if self.frames < 1:
            raise SpecError("frames: must be >= 1")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise SpecError("image_size: expected two positive integers")
        if not 0.0 <= self.static_time <= 1.0:
            raise SpecError("static_time: must lie in [0, 1]")
        if not self.primitives:
            raise SpecError("primitives: at least one primitive required")
        names = set()
        for i, p in enumerate(self.primitives):
            where = f"primitives[{i}]"
            if p.kind not in ("plane", "box", "sphere"):
                raise SpecError(f"{where}.kind: unknown primitive {p.kind!r}")
            if p.name in names:
                raise SpecError(f"{where}.name: duplicate name {p.name!r}")
            names.add(p.name)
            if len(p.albedo) != 3 or not all(0.0 <= a <= 1.0 for a in p.albedo):
                raise SpecError(f"{where}.albedo: three values in [0, 1] required")
            if not 0.0 <= p.roughness <= 1.0:
                raise SpecError(f"{where}.roughness: must lie in [0, 1]")
            if p.kind == "box" and min(p.half_size) <= 0:
                raise SpecError(f"{where}.half_size: must be positive")
            if p.kind == "sphere" and p.radius <= 0:
                raise SpecError(f"{where}.radius: must be positive")
            if p.kind == "plane" and min(p.size) <= 0:
                raise SpecError(f"{where}.size: must be positive")
            if p.motion.kind not in ("static", "linear", "oscillation"):
                raise SpecError(f"{where}.motion.kind: unknown motion {p.motion.kind!r}")
        if "preset" not in self.env and "path" not in self.env:
            raise SpecError("env: needs 'preset' or 'path'")
        return self

    def frame_times(self) -> list[float]:
        if self.frames == 1:
            return [self.static_time]
        return [i / (self.frames - 1) for i in range(self.frames)]

    def cameras(self, times: Optional[list[float]] = None) -> list[Camera]:
        times = self.frame_times() if times is None else times
        c = self.camera
        w, h = self.image_size
        cams = []
        for i, t in enumerate(times):
            az = math.radians(c.azimuth_start_deg + c.azimuth_span_deg * i / max(len(times), 1))
            el = math.radians(c.elevation_deg)
            target = np.asarray(c.target, float)
            eye = target + c.radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
            cams.append(Camera.look_at(eye, target, fov_deg=c.fov_deg, width=w, height=h, time=t))
        return cams

    def labels(self) -> dict[str, str]:
        return {p.name: ("dynamic" if p.motion.dynamic else "static") for p in self.primitives}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        try:
            prims = []
            for i, p in enumerate(d.get("primitives", [])):
                p = dict(p)
                motion = Motion(**p.pop("motion", {}) or {})
                if "type" in p:
                    p["kind"] = p.pop("type")
                prims.append(Primitive(motion=motion, **{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
            cam = OrbitCameras(**d.get("camera", {}))
            spec = cls(
                name=d.get("name", "scene"), primitives=prims, env=d.get("env", {"preset": "uniform"}),
                frames=int(d.get("frames", 1)), camera=cam, image_size=tuple(d.get("image_size", (64, 64))),
                static_time=float(d.get("static_time", 0.5)), seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:
            raise SpecError(f"spec: {exc}") from exc
        return spec.validate()

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def bundled_spec_path(name: str = "box-on-plane") -> Path:
    path = Path(__file__).resolve().parent.parent / "data" / f"{name}.json"
    if not path.exists():
        raise FileNotFoundError(f"no bundled spec named {name!r}")
    return path
