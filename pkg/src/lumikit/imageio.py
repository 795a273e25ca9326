"""PFM / PPM / PGM readers and writers plus camera JSON helpers."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .geometry import Camera, ImageBuffer


def write_pfm(path, image) -> None:
    """Little-endian PFM (scale -1.0). Rows are stored bottom-to-top."""
    img = image.data if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError("PFM supports 1 or 3 channels")
    header = f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(np.flipud(img), dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_pfm(path) -> ImageBuffer:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    c = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=w * h * c, offset=m.end())
    img = np.flipud(data.reshape(h, w, c)).astype(np.float32)
    return ImageBuffer(w, h, c, img)


def linear_to_srgb8(img: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    img = np.clip(np.nan_to_num(np.asarray(img, dtype=np.float64)), 0.0, 1.0)
    return np.round(255.0 * img ** (1.0 / gamma)).astype(np.uint8)


def write_ppm(path, image, *, encode_srgb: bool = True) -> None:
    """8-bit P6 preview; linear input is gamma-2.2 encoded unless told otherwise."""
    img = image.data if isinstance(image, ImageBuffer) else np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    if encode_srgb:
        px = linear_to_srgb8(img)
    else:
        px = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    h, w, _ = px.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw, np.uint8, w * h * 3, m.end()).reshape(h, w, 3)


def write_pgm(path, mask) -> None:
    px = np.round(255.0 * np.clip(np.asarray(mask, dtype=np.float64), 0, 1)).astype(np.uint8)
    px = px.reshape(px.shape[0], px.shape[1])
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw, np.uint8, w * h, m.end()).reshape(h, w).astype(np.float32) / 255.0


def save_cameras(path, cams: list[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cams], indent=1))


def load_cameras(path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("frames", [data])
    return [Camera.from_json(d) for d in data]
