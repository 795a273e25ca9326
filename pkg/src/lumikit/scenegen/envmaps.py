"""Procedural 32x16 lat-long HDR environment maps.

Each preset documents the texel (row, col) of its dominant light in
``DOMINANT_TEXEL``; row 0 is the zenith band, columns follow atan2(y, x).
"""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 32, 16

DOMINANT_TEXEL = {
    "sunset-like": (6, 8),     # warm sun 11 degrees above the horizon, azimuth ~ 95 deg
    "single-texel": (4, 4),    # 51 deg from zenith, azimuth ~ 51 deg
    "overcast": (0, 0),        # brightest band is the zenith; ties resolve to column 0
    "uniform": (0, 0),
}


def _polar_grid(width: int, height: int):
    theta = (np.arange(height) + 0.5) * np.pi / height
    phi = (np.arange(width) + 0.5) * 2 * np.pi / width
    return np.meshgrid(theta, phi, indexing="ij")


def envmap_presets(name: str, *, value: float | None = None, width: int = WIDTH,
                   height: int = HEIGHT, texel: tuple[int, int] | None = None) -> np.ndarray:
    """Return a (height, width, 3) float32 radiance map."""
    theta, phi = _polar_grid(width, height)
    env = np.zeros((height, width, 3), dtype=np.float64)
    if name == "uniform":
        env[:] = 0.5 if value is None else value
    elif name == "single-texel":
        r, c = texel if texel is not None else DOMINANT_TEXEL["single-texel"]
        env[r, c] = 120.0 if value is None else value
    elif name == "sunset-like":
        scale = 1.0 if value is None else value
        up = np.clip(np.cos(theta), 0.0, None)
        sky = 0.15 + 0.25 * up
        env[..., 0] = sky * 1.1
        env[..., 1] = sky * 0.9
        env[..., 2] = sky * 1.3
        # sun with a soft warm halo
        r, c = texel if texel is not None else DOMINANT_TEXEL["sunset-like"]
        sun_t = (r + 0.5) * np.pi / height
        sun_p = (c + 0.5) * 2 * np.pi / width
        cosang = (np.sin(theta) * np.sin(sun_t) * np.cos(phi - sun_p) + np.cos(theta) * np.cos(sun_t))
        halo = np.exp((cosang - 1.0) / 0.02)
        env += halo[..., None] * np.array([8.0, 4.5, 1.5])
        env[r, c] += np.array([40.0, 24.0, 8.0])
        env[theta > np.pi / 2] *= 0.3
        env *= scale
    elif name == "overcast":
        scale = 1.0 if value is None else value
        up = np.cos(theta)
        dome = np.where(up > 0, (1.0 + 2.0 * up) / 3.0, 0.1)
        env[:] = (scale * dome)[..., None] * np.array([0.9, 0.95, 1.0])
    else:
        raise ValueError(f"unknown environment preset {name!r}")
    return env.astype(np.float32)


def dominant_texel(env: np.ndarray) -> tuple[int, int]:
    """(row, col) of the brightest texel by channel sum (first on ties)."""
    lum = np.asarray(env, dtype=np.float64).sum(-1)
    r, c = np.unravel_index(int(np.argmax(lum)), lum.shape)
    return int(r), int(c)
