"""External-occluder shadows from point lights and per-pixel geometry.

Camera space: +x right, +y down, +z forward; pixel ``(px, py)`` with depth
``z`` unprojects to ``((px - cx) z / fx, (py - cy) z / fy, z)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagecore import as_image, read_pfm, write_pfm

# canonical subject bounding box of the procedural scenes (camera space, metres)
SUBJECT_BBOX = (np.array([-0.35, -0.35, 0.75]), np.array([0.35, 0.6, 1.35]))


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class GeometryMaps:
    depth: np.ndarray  # (H, W, 1) metric z, > 0 on the foreground
    normal: np.ndarray  # (H, W, 3) unit normals encoded as (n + 1) / 2
    camera: Camera

    def __post_init__(self):
        self.depth = as_image(self.depth, np.float32)
        self.normal = as_image(self.normal, np.float32)
        if self.depth.shape[:2] != self.normal.shape[:2]:
            raise ValueError("depth and normal maps must share dimensions")

    def decoded_normals(self) -> np.ndarray:
        n = self.normal.astype(np.float64) * 2.0 - 1.0
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)

    def points(self) -> np.ndarray:
        """(H, W, 3) camera-space positions."""
        h, w = self.depth.shape[:2]
        z = self.depth[..., 0].astype(np.float64)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        c = self.camera
        return np.stack([(xs - c.cx) * z / c.fx, (ys - c.cy) * z / c.fy, z], axis=-1)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_pfm(directory / "depth.pfm", self.depth)
        write_pfm(directory / "normal.pfm", self.normal)
        (directory / "camera.json").write_text(json.dumps(self.camera.__dict__))

    @classmethod
    def load(cls, directory: str | Path) -> "GeometryMaps":
        directory = Path(directory)
        cam = Camera(**json.loads((directory / "camera.json").read_text()))
        return cls(read_pfm(directory / "depth.pfm"), read_pfm(directory / "normal.pfm"), cam)


@dataclass
class PointLight:
    position: np.ndarray
    intensity: float = 1.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError("light intensity must be finite and >= 0")
        if min(self.color) < 0:
            raise ValueError("light color must be non-negative")


def _rotation(seed_rng: np.random.Generator) -> np.ndarray:
    q = seed_rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class OccluderSpec:
    """Sphere, oriented box, or blob (union of spheres) between light and subject.

    ``size`` is the sphere radius, the box half-extent, or the blob's overall
    radius.  Blob lobes are derived deterministically from ``seed``.
    """

    kind: str
    center: np.ndarray
    size: float
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    seed: int = 0
    lobes: int = 0

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "blob"):
            raise ValueError(f"unknown occluder kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        if not self.size > 0:
            raise ValueError("occluder size must be > 0")
        if self.lobes < 0:
            raise ValueError("lobe count must be >= 0")

    def spheres(self) -> tuple[np.ndarray, np.ndarray]:
        """(centers (K, 3), radii (K,)) for sphere and blob kinds."""
        if self.kind == "sphere":
            return self.center[None], np.array([self.size])
        rng = np.random.default_rng(self.seed)
        if self.lobes == 0:
            return np.zeros((0, 3)), np.zeros(0)
        offs = rng.normal(size=(self.lobes, 3))
        offs /= np.linalg.norm(offs, axis=1, keepdims=True)
        offs *= rng.uniform(0.0, 0.6, size=(self.lobes, 1)) * self.size
        radii = rng.uniform(0.35, 0.6, size=self.lobes) * self.size
        return self.center + offs, radii

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Point-in-primitive test for ``pts[..., 3]``."""
        if self.kind == "box":
            local = (pts - self.center) @ self.orientation
            return np.all(np.abs(local) <= self.size, axis=-1)
        centers, radii = self.spheres()
        inside = np.zeros(pts.shape[:-1], dtype=bool)
        for c, r in zip(centers, radii):
            inside |= np.sum((pts - c) ** 2, axis=-1) <= r * r
        return inside

    def bounding_radius(self) -> float:
        if self.kind == "box":
            return float(np.sqrt(3) * self.size)
        centers, radii = self.spheres()
        if len(radii) == 0:
            return 0.0
        return float(np.max(np.linalg.norm(centers - self.center, axis=1) + radii))

    def is_between(self, light: PointLight, bbox=SUBJECT_BBOX) -> bool:
        """True if the occluder sits between the light and the subject box without touching either."""
        lo, hi = bbox
        r = self.bounding_radius()
        nearest = np.clip(self.center, lo, hi)
        clear_of_subject = np.linalg.norm(self.center - nearest) > r
        clear_of_light = np.linalg.norm(self.center - light.position) > r
        to_subject = (lo + hi) / 2 - light.position
        s = np.dot(self.center - light.position, to_subject) / np.dot(to_subject, to_subject)
        return bool(clear_of_subject and clear_of_light and 0.0 < s < 1.0)

    def translated(self, offset) -> "OccluderSpec":
        return OccluderSpec(self.kind, self.center + np.asarray(offset, dtype=np.float64),
                            self.size, self.orientation, self.seed, self.lobes)

    def scaled_about(self, pivot, factor: float) -> "OccluderSpec":
        """Homothety about ``pivot``; keeps the shadow cone of a light at ``pivot`` intact."""
        pivot = np.asarray(pivot, dtype=np.float64)
        return OccluderSpec(self.kind, pivot + factor * (self.center - pivot), self.size * factor,
                            self.orientation, self.seed, self.lobes)


def _segment_sphere_clearance(p: np.ndarray, q: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    """Distance from segment p->q to the surface of sphere (c, r); <= 0 means intersecting."""
    d = q - p
    dd = np.maximum(np.sum(d * d, axis=-1), 1e-300)
    s = np.clip(np.sum((c - p) * d, axis=-1) / dd, 0.0, 1.0)
    closest = p + s[..., None] * d
    return np.linalg.norm(closest - c, axis=-1) - r


def _segment_box_hit(p: np.ndarray, q: np.ndarray, occ: OccluderSpec) -> np.ndarray:
    lp = (p - occ.center) @ occ.orientation
    ld = (q - p) @ occ.orientation
    t0 = np.zeros(lp.shape[:-1])
    t1 = np.ones(lp.shape[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            inv = 1.0 / ld[..., a]
            ta = (-occ.size - lp[..., a]) * inv
            tb = (occ.size - lp[..., a]) * inv
            lo = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
            hi = np.where(np.isnan(tb), np.inf, np.maximum(ta, tb))
            parallel = ld[..., a] == 0
            outside = parallel & (np.abs(lp[..., a]) > occ.size)
            lo = np.where(parallel, -np.inf, lo)
            hi = np.where(parallel, np.where(outside, -np.inf, np.inf), hi)
            t0 = np.maximum(t0, lo)
            t1 = np.minimum(t1, hi)
    return t0 <= t1


def visibility_points(pts: np.ndarray, light: PointLight, occ: OccluderSpec,
                      r_soft: float = 0.0) -> np.ndarray:
    """Visibility in [0, 1] of ``light`` from points ``pts[..., 3]``."""
    q = np.broadcast_to(light.position, pts.shape)
    if occ.kind == "box":
        return np.where(_segment_box_hit(pts, q, occ), 0.0, 1.0)
    centers, radii = occ.spheres()
    clearance = np.full(pts.shape[:-1], np.inf)
    for c, r in zip(centers, radii):
        clearance = np.minimum(clearance, _segment_sphere_clearance(pts, q, c, r))
    if r_soft <= 0:
        return np.where(clearance <= 0, 0.0, 1.0)
    return np.clip(clearance / r_soft, 0.0, 1.0)


def visibility(geom: GeometryMaps, light: PointLight, occ: OccluderSpec, px: int, py: int,
               r_soft: float = 0.0) -> float:
    """Visibility of ``light`` from the surface point seen at pixel ``(px, py)``."""
    h, w = geom.depth.shape[:2]
    if not (0 <= px < w and 0 <= py < h):
        raise IndexError(f"pixel ({px}, {py}) outside {w}x{h} image")
    if geom.depth[py, px, 0] <= 0:
        raise ValueError(f"pixel ({px}, {py}) has no positive depth")
    return float(visibility_points(geom.points()[py, px], light, occ, r_soft))


def visibility_map(geom: GeometryMaps, light: PointLight, occ: OccluderSpec,
                   r_soft: float = 0.0) -> np.ndarray:
    """(H, W) visibility; 1 wherever depth is not positive."""
    vis = visibility_points(geom.points(), light, occ, r_soft)
    return np.where(geom.depth[..., 0] > 0, vis, 1.0)


def cast_shadow(img: np.ndarray, mask: np.ndarray, geom: GeometryMaps, light: PointLight,
                occ: OccluderSpec, ambient: float, r_soft: float = 0.0,
                vis: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Darken ``img`` by the occluder's shadow, as a ratio to the unoccluded shading.

    ``shade = ambient + (1 - ambient) max(0, n.l) vis`` is divided by the same
    expression with ``vis = 1``, so an unoccluded pixel is returned unchanged.
    ``vis`` may be supplied to bypass the ray tests.
    """
    if not 0.0 <= ambient < 1.0:
        raise ValueError(f"ambient must lie in [0, 1), got {ambient}")
    img = as_image(img)
    m = as_image(mask, np.float32)[..., 0]
    if vis is None:
        vis = visibility_map(geom, light, occ, r_soft)
    n = geom.decoded_normals()
    to_light = light.position - geom.points()
    to_light /= np.maximum(np.linalg.norm(to_light, axis=-1, keepdims=True), 1e-12)
    cos = np.maximum(np.sum(n * to_light, axis=-1), 0.0)
    fg = (m > 0) & (geom.depth[..., 0] > 0)
    lit = (1.0 - ambient) * cos
    shade_ref = ambient + lit
    shade = ambient + lit * vis
    ratio = np.ones_like(shade)
    ok = fg & (shade_ref > 0)
    ratio[ok] = shade[ok] / shade_ref[ok]
    factor = 1.0 + m * (ratio - 1.0)
    shadowed = np.where(fg[..., None], img * factor[..., None].astype(img.dtype), img)
    shadow_mask = np.where(fg & (cos > 0), 1.0 - vis, 0.0)
    return {"shadowed": shadowed.astype(img.dtype), "shadow_mask": shadow_mask[..., None].astype(np.float32)}


def random_occlusion(seed: int, difficulty: float = 0.5, subject_center=(0.0, 0.0, 1.0),
                     bbox=SUBJECT_BBOX) -> tuple[PointLight, OccluderSpec, float]:
    """Deterministic point light + occluder + ambient level.

    Higher ``difficulty`` means a larger occluder and a darker ambient term.
    """
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    subject = np.asarray(subject_center, dtype=np.float64)
    for _ in range(100):
        # light in front of the subject (towards the camera), off to one side
        light_pos = subject + np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.7, 0.3),
                                        -rng.uniform(0.7, 1.0)])
        aim = subject + np.array([rng.uniform(-0.08, 0.08), rng.uniform(-0.1, 0.15), -0.05])
        frac = rng.uniform(0.35, 0.6)
        center = light_pos + frac * (aim - light_pos)
        size = (0.02 + 0.08 * difficulty) * rng.uniform(0.8, 1.25)
        kind = ["sphere", "box", "blob"][int(rng.integers(0, 3))]
        occ = OccluderSpec(kind, center, size, _rotation(rng), seed=int(rng.integers(0, 2**31)),
                           lobes=int(rng.integers(3, 7)) if kind == "blob" else 0)
        light = PointLight(light_pos, 1.0)
        if occ.is_between(light, bbox):
            break
    else:  # pragma: no cover - the sampling box above always admits a valid placement
        raise RuntimeError("could not place occluder")
    ambient = float(np.clip(0.7 - 0.5 * difficulty + rng.uniform(-0.05, 0.05), 0.05, 0.95))
    return light, occ, ambient
