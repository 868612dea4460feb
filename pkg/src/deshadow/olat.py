"""One-light-at-a-time relighting and training-pair construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envmap import EnvMap, diffuse_blur, project_background, sample_bilinear, tonemap
from .imagecore import as_image, read_pfm, write_pfm

DEFAULT_LIGHTS = 160


@dataclass(frozen=True)
class View:
    yaw: float = 0.0
    pitch: float = 0.0
    fov: float = math.radians(60.0)


@dataclass
class OLATSet:
    """Per-light image stack.

    directions: (N, 3) unit vectors towards each light (camera space).
    solid_angles: (N,) steradians, summing to 4 pi.
    images: (N, H, W, 3) linear radiance per unit light radiance.
    alpha: (H, W, 1) foreground mask in [0, 1].
    """

    directions: np.ndarray
    solid_angles: np.ndarray
    images: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.solid_angles = np.asarray(self.solid_angles, dtype=np.float64)
        self.images = np.asarray(self.images, dtype=np.float32)
        self.alpha = as_image(self.alpha, np.float32)
        n = len(self.directions)
        if self.directions.shape != (n, 3) or self.solid_angles.shape != (n,):
            raise ValueError("directions must be (N, 3) and solid_angles (N,)")
        if self.images.shape[0] != n or self.images.ndim != 4:
            raise ValueError(f"expected {n} images, got array of shape {self.images.shape}")
        if self.images.shape[1:3] != self.alpha.shape[:2]:
            raise ValueError("alpha and images must share dimensions")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("light directions must be unit length")
        total = self.solid_angles.sum()
        if abs(total - 4 * np.pi) > 1e-3 * 4 * np.pi:
            raise ValueError(f"solid angles sum to {total:.6f}, expected 4 pi")

    @property
    def count(self) -> int:
        return len(self.directions)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        lights = [{"direction": d.tolist(), "solid_angle": float(s)}
                  for d, s in zip(self.directions, self.solid_angles)]
        (directory / "lights.json").write_text(json.dumps(lights, indent=1))
        for i, img in enumerate(self.images):
            write_pfm(directory / f"light_{i:03d}.pfm", img)
        write_pfm(directory / "alpha.pfm", self.alpha)

    @classmethod
    def load(cls, directory: str | Path) -> "OLATSet":
        directory = Path(directory)
        lights = json.loads((directory / "lights.json").read_text())
        images = np.stack([read_pfm(directory / f"light_{i:03d}.pfm") for i in range(len(lights))])
        return cls([l["direction"] for l in lights], [l["solid_angle"] for l in lights],
                   images, read_pfm(directory / "alpha.pfm"))


def fibonacci_sphere(n: int = DEFAULT_LIGHTS) -> tuple[np.ndarray, np.ndarray]:
    """``n`` near-uniform unit directions with equal solid angles ``4 pi / n``."""
    i = np.arange(n) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - y * y)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    dirs = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs, np.full(n, 4 * np.pi / n)


def light_weights(olat: OLATSet, env: EnvMap) -> np.ndarray:
    """(N, 3) RGB weight per light: env radiance at its direction times its solid angle."""
    return sample_bilinear(env, olat.directions) * olat.solid_angles[:, None]


def relight(olat: OLATSet, env: EnvMap) -> np.ndarray:
    """Linear HDR image under ``env``: the solid-angle-weighted sum of the stack."""
    w = light_weights(olat, env)
    out = np.einsum("nc,nhwc->hwc", w, olat.images.astype(np.float64), optimize=False)
    return np.maximum(out, 0.0).astype(np.float32)


def composite(fg: np.ndarray, bg: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float32)
    return (a * fg + (1.0 - a) * bg).astype(np.float32)


def render_ldr(olat: OLATSet, env: EnvMap) -> np.ndarray:
    return tonemap(relight(olat, env)).astype(np.float32)


def make_harmonization_pair(olat: OLATSet, env_a: EnvMap, env_b: EnvMap, view: View = View(),
                            allow_identical: bool = False) -> dict[str, np.ndarray]:
    """Foreground lit by ``env_a`` pasted on background ``env_b`` (input) vs.
    the same foreground lit by ``env_b`` (target)."""
    if not allow_identical and np.array_equal(env_a.radiance, env_b.radiance):
        raise ValueError("harmonization pair needs two distinct environment maps")
    h, w = olat.alpha.shape[:2]
    bg = project_background(env_b, view.yaw, view.pitch, view.fov, w, h)
    target = composite(render_ldr(olat, env_b), bg, olat.alpha)
    composite_input = composite(render_ldr(olat, env_a), bg, olat.alpha)
    return {"composite_input": composite_input, "background": bg, "target": target,
            "mask": olat.alpha.copy()}


def make_deshadow_pair(olat: OLATSet, env: EnvMap, angular_sigma: float = 0.4,
                       view: View = View()) -> dict[str, np.ndarray]:
    """Sharp-environment render (input) vs. diffused-environment render (target)."""
    h, w = olat.alpha.shape[:2]
    bg = project_background(env, view.yaw, view.pitch, view.fov, w, h)
    inp = composite(render_ldr(olat, env), bg, olat.alpha)
    target = composite(render_ldr(olat, diffuse_blur(env, angular_sigma)), bg, olat.alpha)
    return {"input": inp, "target": target, "mask": olat.alpha.copy(), "background": bg}
