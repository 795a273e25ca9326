"""Shared math primitives: rotations, pinhole cameras, positional encoding,
image buffers and a reproducible counter-based RNG."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

# Frequencies used by the deformation field.
ENC_T_FREQS = 6
ENC_MU_FREQS = 10


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------

def positional_encode(x, num_freqs: int):
    """sin/cos(2^k pi x) for k in [0, num_freqs), grouped per input dimension.

    Accepts a python scalar, a numpy array or a torch tensor whose last axis
    holds the input dimensions (scalars are treated as 1-d). Output layout per
    input dimension is ``[sin k=0..L-1, cos k=0..L-1]``.
    """
    if num_freqs < 1:
        raise ValueError("num_freqs must be >= 1")
    if isinstance(x, torch.Tensor):
        xt = x if x.dim() > 0 else x.reshape(1)
        freqs = (2.0 ** torch.arange(num_freqs, dtype=xt.dtype, device=xt.device)) * math.pi
        arg = xt[..., :, None] * freqs  # (..., D, L)
        enc = torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)
        return enc.reshape(*xt.shape[:-1], -1)
    xa = np.atleast_1d(np.asarray(x, dtype=np.float64))
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    arg = xa[..., :, None] * freqs
    enc = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)
    return enc.reshape(*xa.shape[:-1], -1)


# ---------------------------------------------------------------------------
# Quaternions / frames
# ---------------------------------------------------------------------------

def quat_normalize(q):
    if isinstance(q, torch.Tensor):
        return q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    q = np.asarray(q, dtype=np.float64)
    return q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)


def quat_to_rotmat(q):
    """Rotation matrices for (w, x, y, z) quaternions; works on numpy or torch."""
    if isinstance(q, torch.Tensor):
        w, x, y, z = q.unbind(-1)
        rows = [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ]
        return torch.stack(rows, dim=-1).reshape(*q.shape[:-1], 3, 3)
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(*q.shape[:-1], 3, 3)


def quat_to_frame(q):
    """Tangent frame ``(t_u, t_v, n)`` = columns of the rotation of ``q``."""
    m = quat_to_rotmat(q)
    return m[..., :, 0], m[..., :, 1], m[..., :, 2]


def frame_to_quat(t_u, t_v, n) -> np.ndarray:
    """Inverse of :func:`quat_to_frame` (numpy only); returns w >= 0."""
    m = np.stack([np.asarray(t_u, float), np.asarray(t_v, float), np.asarray(n, float)], axis=-1)
    return rotmat_to_quat(m)


def rotmat_to_quat(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def orthonormal_basis(n):
    """Two tangents completing ``n`` to a right-handed frame (Duff et al. 2017)."""
    if isinstance(n, torch.Tensor):
        sign = torch.where(n[..., 2] >= 0, 1.0, -1.0).to(n.dtype)
        a = -1.0 / (sign + n[..., 2])
        b = n[..., 0] * n[..., 1] * a
        t1 = torch.stack([1 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], -1)
        t2 = torch.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], -1)
        return t1, t2
    n = np.asarray(n, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t1 = np.stack([1 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], -1)
    t2 = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], -1)
    return t1, t2


def normalize(v, eps: float = 1e-12):
    if isinstance(v, torch.Tensor):
        return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)
    v = np.asarray(v, dtype=np.float64)
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), eps)


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera; camera space is x right, y down, z forward.

    ``transform`` maps camera coordinates to world coordinates.
    """

    transform: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "transform", np.asarray(self.transform, dtype=np.float64).reshape(4, 4))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError(f"camera time {self.time} outside [0, 1]")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def center(self) -> np.ndarray:
        return self.transform[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.transform[:3, :3].copy()

    @property
    def forward(self) -> np.ndarray:
        return self.transform[:3, 2].copy()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation

    def with_time(self, t: float) -> "Camera":
        return Camera(self.transform, self.fx, self.fy, self.cx, self.cy, self.width, self.height, t)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fov_deg: float = 45.0,
                width: int = 64, height: int = 64, time: float = 0.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = normalize(np.asarray(target, dtype=np.float64) - eye)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right = normalize(right)
        down = np.cross(fwd, right)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(m, f, f, width / 2, height / 2, width, height, time)

    def to_json(self) -> dict:
        return {
            "transform": [float(v) for v in self.transform.reshape(-1)],
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "time": self.time,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(np.asarray(d["transform"], dtype=np.float64).reshape(4, 4),
                   float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), float(d.get("time", 0.0)))


def pixel_ray(cam: Camera, px: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray through the center of pixel ``(col, row)``."""
    col, row = px
    if not (0 <= col < cam.width and 0 <= row < cam.height):
        raise ValueError(f"pixel {px} outside {cam.width}x{cam.height} image")
    d_cam = np.array([(col + 0.5 - cam.cx) / cam.fx, (row + 0.5 - cam.cy) / cam.fy, 1.0])
    d = cam.rotation @ d_cam
    return cam.center, d / np.linalg.norm(d)


def camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Ray origins and unit directions for every pixel, row-major (H*W, 3)."""
    cols, rows = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    d_cam = np.stack([(cols + 0.5 - cam.cx) / cam.fx, (rows + 0.5 - cam.cy) / cam.fy,
                      np.ones_like(cols, dtype=np.float64)], axis=-1).reshape(-1, 3)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.center, d.shape).copy()
    return o, d


# ---------------------------------------------------------------------------
# Image buffers
# ---------------------------------------------------------------------------

@dataclass
class ImageBuffer:
    """Row-major float32 image with 1 or 3 channels, stored as (H, W, C)."""

    width: int
    height: int
    channels: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.size != self.width * self.height * self.channels:
            raise ValueError(
                f"expected {self.width * self.height * self.channels} samples, got {data.size}")
        self.data = data.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr) -> "ImageBuffer":
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[..., None]
        return cls(arr.shape[1], arr.shape[0], arr.shape[2], arr)

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 3) -> "ImageBuffer":
        return cls(width, height, channels, np.zeros((height, width, channels), np.float32))


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

class Rng:
    """Seeded Philox (counter-based) generator with keyed sub-streams."""

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *keys: int) -> "Rng":
        """Independent stream determined only by (seed, parent keys, keys)."""
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def open_uniform(self, size=None, eps: float = 1e-7):
        """Uniform draws strictly inside (0, 1)."""
        return np.clip(self._gen.uniform(0.0, 1.0, size), eps, 1.0 - eps)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False):
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int):
        return self._gen.permutation(n)
