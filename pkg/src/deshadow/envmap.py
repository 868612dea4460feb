"""Equirectangular HDR environment maps.

Directions live in camera space: +x right, +y down, +z forward (away from
the camera, into the scene behind the subject).  Texel ``(u, v)`` of a
``H x 2H`` map has longitude ``phi = 2 pi (u + 0.5) / W - pi`` and latitude
``theta = pi (v + 0.5) / H - pi / 2``; row 0 is the zenith (-y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .imagecore import as_image, resample_area

LIGHTING_RES = 32


@dataclass(frozen=True)
class EnvMap:
    """``(H, 2H, 3)`` non-negative linear radiance."""

    radiance: np.ndarray

    def __post_init__(self):
        img = as_image(self.radiance)
        h, w, c = img.shape
        if c != 3 or w != 2 * h:
            raise ValueError(f"environment map must be (H, 2H, 3), got {img.shape}")
        if img.min() < 0:
            raise ValueError("environment radiance must be non-negative")
        object.__setattr__(self, "radiance", img)

    @property
    def height(self) -> int:
        return self.radiance.shape[0]

    def __add__(self, other: "EnvMap") -> "EnvMap":
        return EnvMap(self.radiance + other.radiance)

    def scaled(self, s: float) -> "EnvMap":
        return EnvMap(self.radiance * s)

    def rotated_yaw(self, shift: int) -> "EnvMap":
        """Rotate about the vertical axis by a whole number of texels."""
        return EnvMap(np.roll(self.radiance, shift, axis=1))

    def energy(self) -> np.ndarray:
        """Per-channel integral of radiance over the sphere."""
        w = solid_angle_weights(self.height)
        return np.einsum("hw,hwc->c", w, self.radiance.astype(np.float64))


def texel_directions(h: int) -> np.ndarray:
    """Unit directions of texel centres, shape ``(H, 2H, 3)``."""
    w = 2 * h
    phi = 2 * np.pi * (np.arange(w) + 0.5) / w - np.pi
    theta = np.pi * (np.arange(h) + 0.5) / h - np.pi / 2
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.cos(th) * np.sin(ph), np.sin(th), np.cos(th) * np.cos(ph)], axis=-1)


def direction_to_uv(d: np.ndarray, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous texel coordinates (u, v) for directions ``d[..., 3]``."""
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    phi = np.arctan2(d[..., 0], d[..., 2])
    theta = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    u = (phi + np.pi) * (2 * h) / (2 * np.pi) - 0.5
    v = (theta + np.pi / 2) * h / np.pi - 0.5
    return u, v


def sample_bilinear(env: EnvMap, d: np.ndarray) -> np.ndarray:
    """Bilinear radiance lookup; wraps in longitude, clamps in latitude."""
    h = env.height
    w = 2 * h
    u, v = direction_to_uv(d, h)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    u0 = u0.astype(int)
    v0 = v0.astype(int)
    ua, ub = u0 % w, (u0 + 1) % w
    va, vb = np.clip(v0, 0, h - 1), np.clip(v0 + 1, 0, h - 1)
    r = env.radiance.astype(np.float64)
    top = r[va, ua] * (1 - fu) + r[va, ub] * fu
    bot = r[vb, ua] * (1 - fu) + r[vb, ub] * fu
    return top * (1 - fv) + bot * fv


def solid_angle_weights(h: int) -> np.ndarray:
    """Per-texel solid angles of an ``h x 2h`` map, summing to 4 pi.

    Uses the exact area of each latitude band,
    ``(2 pi / W) (sin theta_hi - sin theta_lo)``, which is the
    ``cos(latitude)`` profile times a constant ``sinc(pi / 2h)`` factor.
    """
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    edges = np.pi * np.arange(h + 1) / h - np.pi / 2
    band = np.diff(np.sin(edges))
    return np.repeat((2 * np.pi / (2 * h)) * band[:, None], 2 * h, axis=1)


@lru_cache(maxsize=8)
def _diffusion_operator(h: int, sigma: float) -> np.ndarray:
    """Row-stochastic ``P`` with ``sum_o w_o P[o, i] = w_i`` (energy exact, linear).

    Gaussian weights on great-circle distance, times solid angle, balanced
    symmetrically (Sinkhorn) so rows stay normalized averages while the
    column condition makes the operator energy preserving.
    """
    dirs = texel_directions(h).reshape(-1, 3)
    w = solid_angle_weights(h).ravel()
    cosang = np.clip(dirs @ dirs.T, -1.0, 1.0)
    k = np.exp(-(np.arccos(cosang) ** 2) / (2 * sigma * sigma))
    m = w[:, None] * k * w[None, :]
    d = 1.0 / np.sqrt(m.sum(axis=1) / w)
    for _ in range(500):
        md = m @ d
        d_new = np.sqrt(d * w / md)
        if np.max(np.abs(d_new / d - 1.0)) < 1e-13:
            d = d_new
            break
        d = d_new
    balanced = d[:, None] * m * d[None, :]
    p = balanced / w[:, None]
    p /= p.sum(axis=1, keepdims=True)
    return p


def diffuse_blur(env: EnvMap, angular_sigma: float = 0.4) -> EnvMap:
    """Energy-preserving spherical Gaussian blur.

    Each output texel is a normalized weighted average of the input over
    great-circle distance; the result is then rescaled so the integrated
    energy matches the input.
    """
    if not (0 < angular_sigma <= np.pi / 2):
        raise ValueError(f"angular_sigma must lie in (0, pi/2], got {angular_sigma}")
    h = env.height
    p = _diffusion_operator(h, float(angular_sigma))
    src = env.radiance.astype(np.float64).reshape(-1, 3)
    out = (p @ src).reshape(h, 2 * h, 3)
    w = solid_angle_weights(h)
    e_in = np.einsum("hw,hwc->", w, env.radiance.astype(np.float64))
    e_out = np.einsum("hw,hwc->", w, out)
    if e_out > 0:
        out *= e_in / e_out
    return EnvMap(out.astype(np.float32))


def tonemap(x):
    """Reinhard ``x / (1 + x)`` followed by a 1/2.2 gamma; maps [0, inf) to [0, 1)."""
    x = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    return np.power(x / (1.0 + x), 1.0 / 2.2)


def camera_rays(out_w: int, out_h: int, fov: float, yaw: float = 0.0, pitch: float = 0.0) -> np.ndarray:
    """Unit view directions of a pinhole camera; ``fov`` is horizontal."""
    f = (out_w / 2) / math.tan(fov / 2)
    xs = (np.arange(out_w) + 0.5 - out_w / 2) / f
    ys = (np.arange(out_h) + 0.5 - out_h / 2) / f
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    d = np.stack([xx, yy, np.ones_like(xx)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    # pitch about x (positive looks up, i.e. towards -y), then yaw about y
    cp, sp = math.cos(pitch), math.sin(pitch)
    d = np.stack([d[..., 0], cp * d[..., 1] - sp * d[..., 2], sp * d[..., 1] + cp * d[..., 2]], -1)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.stack([cy * d[..., 0] + sy * d[..., 2], d[..., 1], -sy * d[..., 0] + cy * d[..., 2]], -1)


def project_background(env: EnvMap, view_yaw: float, view_pitch: float, fov: float,
                       out_w: int, out_h: int, tonemapped: bool = True) -> np.ndarray:
    """Perspective view of the environment, tonemapped to LDR by default."""
    if not 0 < fov < np.pi:
        raise ValueError(f"fov must lie in (0, pi), got {fov}")
    rays = camera_rays(out_w, out_h, fov, view_yaw, view_pitch)
    lin = sample_bilinear(env, rays)
    out = tonemap(lin) if tonemapped else lin
    return out.astype(np.float32)


def lighting_map(img: np.ndarray) -> np.ndarray:
    """32x32 area-downsampled LDR lighting map."""
    img = as_image(img)
    if img.shape[2] != 3:
        raise ValueError("lighting map source must have 3 channels")
    if img.min() < -1e-6 or img.max() > 1 + 1e-6:
        raise ValueError("lighting map source must be LDR in [0, 1]")
    out = resample_area(img, LIGHTING_RES, LIGHTING_RES)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
