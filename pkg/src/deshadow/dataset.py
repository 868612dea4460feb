"""Procedural portrait scenes, pair builders, augmentation and manifests.

A scene is a handful of Lambertian ellipsoids (head, nose, neck, torso)
seen by a pinhole camera at the origin looking down +z.  Self-occlusion
between them supplies the shadows the model learns to remove.
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envmap import EnvMap, camera_rays, diffuse_blur, lighting_map, project_background
from .imagecore import as_image, read_pfm, write_pfm
from .olat import OLATSet, View, composite, fibonacci_sphere, make_deshadow_pair, \
    make_harmonization_pair, render_ldr
from .shadowsim import Camera, GeometryMaps, cast_shadow, random_occlusion

MANIFEST_VERSION = 1
HARMONIZATION = "harmonization"
DESHADOW = "deshadow"
KINDS = (HARMONIZATION, DESHADOW)
SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------- scenes


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass
class SceneSpec:
    seed: int
    head: Ellipsoid
    shoulders: Ellipsoid
    extras: list[Ellipsoid] = field(default_factory=list)  # nose, neck
    noise_amp: float = 0.1
    noise_octaves: int = 3
    fov: float = math.radians(32.0)

    def parts(self) -> list[Ellipsoid]:
        return [self.head, self.shoulders, *self.extras]

    def base_colors(self) -> np.ndarray:
        """Per-region base albedo (skin RGB, clothing RGB) as one palette vector."""
        return np.array([*self.head.albedo, *self.shoulders.albedo])

    def validate(self) -> None:
        for e in self.parts():
            if min(e.radii) <= 0:
                raise ValueError("ellipsoid radii must be > 0")
            if e.center[2] - e.radii[2] <= 0:
                raise ValueError("scene geometry must lie in front of the camera")
            if not all(0.0 < a <= 1.0 for a in e.albedo):
                raise ValueError("albedo must lie in (0, 1]")
        if not 0.0 <= self.noise_amp < 1.0:
            raise ValueError("noise amplitude must lie in [0, 1)")


def _skin_tone(rng: np.random.Generator) -> tuple[float, float, float]:
    # dark to light base tones with independent warmth and saturation
    r = rng.uniform(0.12, 0.9)
    g = r * rng.uniform(0.5, 0.85)
    b = g * rng.uniform(0.55, 1.0)
    return (float(r), float(g), float(b))


def gen_scene(seed: int) -> SceneSpec:
    """Deterministic random head-and-shoulders scene."""
    rng = np.random.default_rng([seed, 0x5CE])
    skin = _skin_tone(rng)
    cloth = tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3))
    hx, hy, hz = rng.uniform(-0.04, 0.04), rng.uniform(-0.1, -0.02), rng.uniform(0.95, 1.1)
    s = rng.uniform(0.9, 1.1)
    head = Ellipsoid((hx, hy, hz), (0.085 * s, 0.115 * s, 0.1 * s), skin)
    # nose placed on the face, turned by the head yaw / pitch
    yaw, pitch = rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2)
    ny = hy + 0.01 * s
    off = np.array([math.sin(yaw) * math.cos(pitch), -math.sin(pitch), -math.cos(yaw) * math.cos(pitch)])
    nose_c = np.array([hx, ny, hz]) + off * 0.095 * s
    nose = Ellipsoid(tuple(float(v) for v in nose_c), (0.016 * s, 0.03 * s, 0.03 * s), skin)
    neck = Ellipsoid((hx * 0.5, hy + 0.14 * s, hz + 0.02), (0.05 * s, 0.08 * s, 0.05 * s), skin)
    torso = Ellipsoid((rng.uniform(-0.03, 0.03), hy + 0.3 * s, hz + 0.06),
                      (rng.uniform(0.2, 0.26) * s, 0.14 * s, 0.11 * s), cloth)
    spec = SceneSpec(seed, head, torso, [nose, neck], noise_amp=float(rng.uniform(0.03, 0.2)),
                     noise_octaves=int(rng.integers(2, 5)))
    spec.validate()
    return spec


def value_noise(h: int, w: int, octaves: int, rng: np.random.Generator) -> np.ndarray:
    """Fractal value noise in [-1, 1]."""
    out = np.zeros((h, w))
    total = 0.0
    for k in range(octaves):
        cells = 4 * 2 ** k
        lattice = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, h, endpoint=False)
        xs = np.linspace(0, cells, w, endpoint=False)
        y0, x0 = ys.astype(int), xs.astype(int)
        fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        a = lattice[y0][:, x0]
        b = lattice[y0][:, x0 + 1]
        c = lattice[y0 + 1][:, x0]
        d = lattice[y0 + 1][:, x0 + 1]
        amp = 0.5 ** k
        out += amp * ((a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy)
        total += amp
    return out / total


def _ray_ellipsoid(o: np.ndarray, d: np.ndarray, e: Ellipsoid) -> tuple[np.ndarray, np.ndarray]:
    """Nearest and farthest ray parameters (NaN where missed)."""
    r = np.asarray(e.radii)
    oc = (o - np.asarray(e.center)) / r
    dr = d / r
    a = np.sum(dr * dr, axis=-1)
    b = 2.0 * np.sum(oc * dr, axis=-1)
    c = np.sum(oc * oc, axis=-1) - 1.0
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        sq = np.sqrt(disc)
    t0 = np.where(disc >= 0, (-b - sq) / (2 * a), np.nan)
    t1 = np.where(disc >= 0, (-b + sq) / (2 * a), np.nan)
    return t0, t1


def render_olat_stack(scene: SceneSpec, n_lights: int = 160, res: int = 64,
                      directions: np.ndarray | None = None) -> tuple[OLATSet, GeometryMaps]:
    """Lambertian OLAT stack with ray-traced self-shadowing, plus analytic geometry."""
    if res < 16:
        raise ValueError("res must be >= 16")
    scene.validate()
    if directions is None:
        directions, solid = fibonacci_sphere(n_lights)
    else:
        directions = np.asarray(directions, dtype=np.float64)
        directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        solid = np.full(len(directions), 4 * np.pi / len(directions))
    parts = scene.parts()
    rays = camera_rays(res, res, scene.fov)
    origin = np.zeros(3)
    best_t = np.full((res, res), np.inf)
    best_k = np.full((res, res), -1)
    for k, e in enumerate(parts):
        t0, _ = _ray_ellipsoid(origin, rays, e)
        closer = np.isfinite(t0) & (t0 > 0) & (t0 < best_t)
        best_t[closer] = t0[closer]
        best_k[closer] = k
    hit = best_k >= 0
    pts = rays * np.where(hit, best_t, 0.0)[..., None]
    normals = np.zeros_like(pts)
    albedo = np.zeros_like(pts)
    for k, e in enumerate(parts):
        sel = best_k == k
        g = (pts[sel] - np.asarray(e.center)) / np.asarray(e.radii) ** 2
        normals[sel] = g / np.linalg.norm(g, axis=1, keepdims=True)
        albedo[sel] = e.albedo
    noise = value_noise(res, res, scene.noise_octaves, np.random.default_rng([scene.seed, 0xA1B]))
    albedo = np.clip(albedo * (1.0 + scene.noise_amp * noise[..., None]), 0.0, 1.0)

    p, n, kk, alb = pts[hit], normals[hit], best_k[hit], albedo[hit]
    cos = np.maximum(n @ directions.T, 0.0)  # (P, N)
    vis = np.ones_like(cos, dtype=bool)
    start = p + 1e-4 * n
    for k, e in enumerate(parts):
        others = kk != k
        if not np.any(others):
            continue
        t0, t1 = _ray_ellipsoid(start[others][:, None, :], directions[None, :, :], e)
        blocked = np.isfinite(t1) & (t1 > 0)
        vis[others] &= ~blocked
    stack = np.zeros((len(directions), res, res, 3))
    shade = (cos * vis)[:, :, None] * (alb / np.pi)[:, None, :]  # (P, N, 3)
    stack[:, hit] = np.transpose(shade, (1, 0, 2))
    alpha = hit.astype(np.float32)[..., None]
    olat = OLATSet(directions, solid, stack.astype(np.float32), alpha)

    f = (res / 2) / math.tan(scene.fov / 2)
    depth = np.where(hit, pts[..., 2], 0.0)[..., None]
    enc = np.where(hit[..., None], (normals + 1.0) / 2.0, 0.5)
    geom = GeometryMaps(depth.astype(np.float32), enc.astype(np.float32),
                        Camera(f, f, res / 2 - 0.5, res / 2 - 0.5))
    return olat, geom


# --------------------------------------------------------------------------- env library


def random_env(seed: int, h: int = 32) -> EnvMap:
    """Sky gradient, ground and one or two broad sun lobes, normalized to a random exposure."""
    from .envmap import solid_angle_weights, texel_directions

    rng = np.random.default_rng([seed, 0xE11])
    dirs = texel_directions(h)
    up = -dirs[..., 1]  # +1 at the zenith
    sky = rng.uniform(0.2, 1.0, 3) * rng.uniform(0.3, 1.0)
    ground = rng.uniform(0.05, 0.6, 3) * rng.uniform(0.1, 0.5)
    t = np.clip(up * 2.0 + 0.5, 0.0, 1.0)[..., None]
    rad = t * sky * (0.6 + 0.4 * up[..., None].clip(0)) + (1 - t) * ground
    for _ in range(int(rng.integers(1, 3))):
        elev = rng.uniform(-0.15, 1.2)
        az = rng.uniform(-np.pi, np.pi)
        sd = np.array([math.cos(elev) * math.sin(az), -math.sin(elev), math.cos(elev) * math.cos(az)])
        width = rng.uniform(0.15, 0.3)
        lobe = np.exp((dirs @ sd - 1.0) / (width * width))
        color = rng.uniform(0.6, 1.0, 3)
        rad = rad + rng.uniform(25.0, 90.0) * lobe[..., None] * color
    w = solid_angle_weights(h)
    mean = np.einsum("hw,hwc->", w, rad) / (4 * np.pi * 3)
    rad *= rng.uniform(0.6, 1.4) / mean
    return EnvMap(rad.astype(np.float32))


def make_env_library(n: int = 16, seed: int = 0, h: int = 32) -> list[EnvMap]:
    return [random_env(seed * 100_003 + i, h) for i in range(n)]


# --------------------------------------------------------------------------- records


@dataclass
class SamplePair:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    lighting: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)
    background: np.ndarray | None = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")
        shapes = {as_image(self.input).shape[:2], as_image(self.target).shape[:2],
                  as_image(self.mask).shape[:2]}
        if len(shapes) != 1:
            raise ValueError(f"pair images disagree in size: {sorted(shapes)}")
        if as_image(self.lighting).shape != (32, 32, 3):
            raise ValueError("lighting map must be 32x32x3")
        m = as_image(self.mask)
        if m.min() < 0 or m.max() > 1:
            raise ValueError("mask values must lie in [0, 1]")


def _write_record(root: Path, rec_id: str, pair: SamplePair) -> str:
    rel = f"records/{rec_id}"
    final = root / rel
    tmp = root / "records" / f".{rec_id}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    write_pfm(tmp / "input.pfm", pair.input)
    write_pfm(tmp / "target.pfm", pair.target)
    write_pfm(tmp / "mask.pfm", pair.mask)
    write_pfm(tmp / "lighting.pfm", pair.lighting)
    if pair.background is not None:
        write_pfm(tmp / "background.pfm", pair.background)
    meta = {"id": rec_id, "kind": pair.kind, "provenance": pair.provenance}
    (tmp / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)
    return rel


@dataclass
class Manifest:
    kind: str
    split: str
    records: list[dict]
    config: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION
    root: Path | None = None

    @property
    def counts(self) -> dict[str, int]:
        out = {"total": len(self.records)}
        for r in self.records:
            key = r["source"]
            out[key] = out.get(key, 0) + 1
        return out

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "kind": self.kind, "split": self.split,
                           "counts": self.counts, "config": self.config, "records": self.records},
                          indent=1, sort_keys=True)

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        path = root / "manifest.json"
        tmp = root / ".manifest.json.tmp"
        tmp.write_text(self.to_json())
        os.replace(tmp, path)
        self.root = root
        return path

    def load_pair(self, index: int) -> SamplePair:
        rec = self.records[index]
        d = self.root / rec["dir"]
        bg = d / "background.pfm"
        return SamplePair(read_pfm(d / "input.pfm"), read_pfm(d / "target.pfm"),
                          read_pfm(d / "mask.pfm"), read_pfm(d / "lighting.pfm"), rec["kind"],
                          rec["provenance"], read_pfm(bg) if bg.exists() else None)

    @classmethod
    def load(cls, path: str | Path, validate: bool = True) -> "Manifest":
        """Load ``manifest.json`` (or its directory); checks files and pair invariants."""
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        data = json.loads(path.read_text())
        if data.get("version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {data.get('version')}")
        m = cls(data["kind"], data["split"], data["records"], data.get("config", {}),
                data["version"], path.parent)
        ids = [r["id"] for r in m.records]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate record ids")
        if validate:
            for i, r in enumerate(m.records):
                d = m.root / r["dir"]
                for name in ("input.pfm", "target.pfm", "mask.pfm", "lighting.pfm", "meta.json"):
                    if not (d / name).exists():
                        raise FileNotFoundError(f"{path}: record {r['id']} is missing {name}")
                if r["kind"] != m.kind:
                    raise ValueError(f"{path}: record {r['id']} has kind {r['kind']}, manifest {m.kind}")
                m.load_pair(i).validate()
        return m


def _new_manifest(kind: str, split: str, config: dict) -> Manifest:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    return Manifest(kind, split, [], config)


def _rng(seed: int, index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, tag])


def _pick_env(envs: list[EnvMap], rng: np.random.Generator, exclude: int | None = None):
    choices = [i for i in range(len(envs)) if i != exclude]
    k = int(rng.choice(choices))
    shift = int(rng.integers(0, envs[k].radiance.shape[1]))
    return k, shift, envs[k].rotated_yaw(shift)


def build_harmonization_set(n: int, seed: int, envs: list[EnvMap], out_dir: str | Path,
                            res: int = 64, split: str = "train") -> Manifest:
    """Foreground lit by one environment composited on another's background."""
    if len(envs) < 2:
        raise ValueError("harmonization pairs need at least 2 environment maps")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    man = _new_manifest(HARMONIZATION, split, {"n": n, "seed": seed, "res": res, "envs": len(envs)})
    for i in range(n):
        rng = _rng(seed, i, 1)
        scene_seed = int(rng.integers(0, 2**31))
        olat, _ = render_olat_stack(gen_scene(scene_seed), res=res)
        ka, sa, env_a = _pick_env(envs, rng)
        kb, sb, env_b = _pick_env(envs, rng, exclude=ka)
        view = View(fov=gen_scene(scene_seed).fov)
        p = make_harmonization_pair(olat, env_a, env_b, view)
        pair = SamplePair(p["composite_input"], p["target"], p["mask"], lighting_map(p["background"]),
                          HARMONIZATION, {"scene_seed": scene_seed, "env_a": [ka, sa], "env_b": [kb, sb],
                                          "occluder_seed": None}, p["background"])
        rec_id = f"{split}-h{i:05d}"
        man.records.append({"id": rec_id, "dir": _write_record(root, rec_id, pair),
                            "kind": HARMONIZATION, "source": "relit", "provenance": pair.provenance})
    man.save(root)
    return man


def contrast_ratio(img: np.ndarray, mask: np.ndarray) -> float:
    """p95 / p50 foreground luminance."""
    from .imagecore import luma

    y = luma(img)[as_image(mask)[..., 0] > 0.5]
    if y.size == 0:
        return 1.0
    p50 = np.percentile(y, 50)
    return float(np.percentile(y, 95) / max(p50, 1e-6))


def external_shadow(img: np.ndarray, mask: np.ndarray, geom: GeometryMaps, target: np.ndarray,
                    occ_seed: int, max_tries: int = 20):
    """Cast a random occluder shadow on ``img``; retries until the shadow lands on the subject.

    Returns ``(shadowed, occluder_seed_used)``.
    """
    m = as_image(mask)[..., 0] > 0.5
    target_contrast = contrast_ratio(target, mask)
    fallback = None
    for k in range(max_tries):
        s = occ_seed * 131 + k
        srng = np.random.default_rng([s, 0x0CC])
        difficulty = float(srng.uniform(0.2, 1.0))
        r_soft = float(srng.uniform(0.002, 0.015))
        light, occ, ambient = random_occlusion(s, difficulty)
        out = cast_shadow(img, mask, geom, light, occ, ambient, r_soft=r_soft)
        covered = float(np.mean(out["shadow_mask"][..., 0][m] > 0.5)) if m.any() else 0.0
        if fallback is None:
            fallback = (out["shadowed"], s)
        if 0.05 <= covered <= 0.7 and contrast_ratio(out["shadowed"], mask) > target_contrast:
            return out["shadowed"], s
    return fallback


def build_deshadow_set(n: int, seed: int, envs: list[EnvMap], mix: dict[str, float] | None,
                       out_dir: str | Path, res: int = 64, angular_sigma: float = 0.4,
                       split: str = "train") -> Manifest:
    """Sharp-lit renders (optionally with an external shadow) paired with diffused-lit renders."""
    mix = dict(mix or {"lightstage_frac": 0.5, "external_frac": 0.5})
    if set(mix) != {"lightstage_frac", "external_frac"}:
        raise ValueError("mix needs exactly lightstage_frac and external_frac")
    ls, ex = mix["lightstage_frac"], mix["external_frac"]
    if min(ls, ex) < 0 or abs(ls + ex - 1.0) > 1e-9:
        raise ValueError(f"mix fractions must be >= 0 and sum to 1, got {ls} + {ex}")
    if not envs:
        raise ValueError("deshadow pairs need at least 1 environment map")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    man = _new_manifest(DESHADOW, split, {"n": n, "seed": seed, "res": res, "mix": mix,
                                          "angular_sigma": angular_sigma, "envs": len(envs)})
    for i in range(n):
        # evenly interleaved deterministic partition: exactly floor(n * ex) external records
        external = math.floor((i + 1) * ex + 1e-9) > math.floor(i * ex + 1e-9)
        rng = _rng(seed, i, 2)
        scene_seed = int(rng.integers(0, 2**31))
        scene = gen_scene(scene_seed)
        olat, geom = render_olat_stack(scene, res=res)
        k, shift, env = _pick_env(envs, rng)
        p = make_deshadow_pair(olat, env, angular_sigma, View(fov=scene.fov))
        inp, occ_seed = p["input"], None
        if external:
            inp, occ_seed = external_shadow(inp, p["mask"], geom, p["target"], int(rng.integers(0, 2**31)))
        pair = SamplePair(inp, p["target"], p["mask"], lighting_map(inp), DESHADOW,
                          {"scene_seed": scene_seed, "env": [k, shift], "occluder_seed": occ_seed},
                          p["background"])
        rec_id = f"{split}-d{i:05d}"
        man.records.append({"id": rec_id, "dir": _write_record(root, rec_id, pair), "kind": DESHADOW,
                            "source": "external" if external else "lightstage",
                            "provenance": pair.provenance})
    man.save(root)
    return man


def build_bootstrap_set(n: int, seed: int, envs: list[EnvMap], params, out_dir: str | Path,
                        res: int = 64, steps: int = 50, split: str = "train") -> Manifest:
    """Pseudo-labelled pairs: a trained model's output on held-out scenes becomes the target
    for the same scene with an added external shadow."""
    from .diffusion.sampler import sample
    from .diffusion.schedule import make_schedule

    sched = make_schedule()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    man = _new_manifest(DESHADOW, split, {"n": n, "seed": seed, "res": res, "bootstrap": True})
    for i in range(n):
        rng = _rng(seed, i, 3)
        scene_seed = int(rng.integers(0, 2**31))
        scene = gen_scene(scene_seed)
        olat, geom = render_olat_stack(scene, res=res)
        k, shift, env = _pick_env(envs, rng)
        bg = project_background(env, 0.0, 0.0, scene.fov, res, res)
        real = composite(render_ldr(olat, env), bg, olat.alpha)
        pseudo = sample(params, real, olat.alpha, lighting_map(real), sched, steps,
                        seed=int(rng.integers(0, 2**31)))
        pseudo = composite(pseudo, bg, olat.alpha)
        inp, occ_seed = external_shadow(real, olat.alpha, geom, pseudo, int(rng.integers(0, 2**31)))
        pair = SamplePair(inp, pseudo, olat.alpha.copy(), lighting_map(inp), DESHADOW,
                          {"scene_seed": scene_seed, "env": [k, shift], "occluder_seed": occ_seed,
                           "pseudo_label": True}, bg)
        rec_id = f"{split}-b{i:05d}"
        man.records.append({"id": rec_id, "dir": _write_record(root, rec_id, pair), "kind": DESHADOW,
                            "source": "bootstrap", "provenance": pair.provenance})
    man.save(root)
    return man


@dataclass
class PairArrays:
    """Whole manifest stacked into arrays, the form the trainer consumes."""

    kind: str
    ids: list[str]
    inputs: np.ndarray
    targets: np.ndarray
    masks: np.ndarray
    lighting: np.ndarray
    backgrounds: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_manifest(cls, manifest: Manifest | str | Path) -> "PairArrays":
        if not isinstance(manifest, Manifest):
            manifest = Manifest.load(manifest)
        pairs = [manifest.load_pair(i) for i in range(len(manifest.records))]
        if not pairs:
            raise ValueError("manifest has no records")
        bgs = None
        if all(p.background is not None for p in pairs):
            bgs = np.stack([p.background for p in pairs])
        return cls(manifest.kind, [r["id"] for r in manifest.records],
                   np.stack([p.input for p in pairs]), np.stack([p.target for p in pairs]),
                   np.stack([p.mask for p in pairs]), np.stack([p.lighting for p in pairs]), bgs)

    @classmethod
    def concat(cls, parts: list["PairArrays"]) -> "PairArrays":
        kinds = {p.kind for p in parts}
        if len(kinds) != 1:
            raise ValueError(f"cannot concatenate kinds {sorted(kinds)}")
        bgs = None
        if all(p.backgrounds is not None for p in parts):
            bgs = np.concatenate([p.backgrounds for p in parts])
        return cls(parts[0].kind, sum((p.ids for p in parts), []),
                   np.concatenate([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]),
                   np.concatenate([p.masks for p in parts]), np.concatenate([p.lighting for p in parts]), bgs)


# --------------------------------------------------------------------------- augmentation

ROTATIONS = (0.0, math.radians(10.0), -math.radians(10.0))
CROP_FRAC = 0.875


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0
    flip: bool = False
    crop: tuple[int, int] | None = None  # top-left of the 87.5% window

    def is_identity(self) -> bool:
        return self.rotation == 0.0 and not self.flip and self.crop is None


def draw_augment(seed: int, h: int, w: int) -> AugmentParams:
    rng = np.random.default_rng([seed, 0xA06])
    rot = ROTATIONS[int(rng.integers(0, 3))]
    flip = bool(rng.integers(0, 2))
    crop = None
    if rng.integers(0, 2):
        ch, cw = int(round(h * CROP_FRAC)), int(round(w * CROP_FRAC))
        crop = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)))
    return AugmentParams(rot, flip, crop)


def _rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Bilinear rotation about the image centre with clamp-to-edge sampling."""
    if angle == 0.0:
        return img
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    sx = c * (xs - cx) + s * (ys - cy) + cx
    sy = -s * (xs - cx) + c * (ys - cy) + cy
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(int), w - 2)
    y0 = np.minimum(np.floor(sy).astype(int), h - 2)
    fx, fy = (sx - x0)[..., None], (sy - y0)[..., None]
    a = img.astype(np.float64)
    out = (a[y0, x0] * (1 - fx) + a[y0, x0 + 1] * fx) * (1 - fy) + \
          (a[y0 + 1, x0] * (1 - fx) + a[y0 + 1, x0 + 1] * fx) * fy
    return out.astype(img.dtype)


def apply_augment(img: np.ndarray, p: AugmentParams, binary: bool = False) -> np.ndarray:
    out = _rotate(img, p.rotation)
    if binary and p.rotation != 0.0:
        out = (out >= 0.5).astype(img.dtype)
    if p.flip:
        out = out[:, ::-1]
    if p.crop is not None:
        h, w = img.shape[:2]
        ch, cw = int(round(h * CROP_FRAC)), int(round(w * CROP_FRAC))
        y, x = p.crop
        win = out[y:y + ch, x:x + cw]
        top, left = (h - ch) // 2, (w - cw) // 2
        out = np.pad(win, ((top, h - ch - top), (left, w - cw - left), (0, 0)), mode="reflect")
    return np.ascontiguousarray(out)


def augment_arrays(inp, tgt, msk, lit, kind: str, seed: int, params: AugmentParams | None = None):
    """Same geometric transform on input, target and mask; lighting redone for deshadow pairs."""
    p = params if params is not None else draw_augment(seed, *np.shape(inp)[:2])
    if p.is_identity():
        return inp, tgt, msk, lit
    binary = bool(np.all((msk == 0) | (msk == 1)))
    inp2 = apply_augment(inp, p)
    out = (inp2, apply_augment(tgt, p), apply_augment(msk, p, binary=binary))
    lit2 = lighting_map(np.clip(inp2, 0.0, 1.0)) if kind == DESHADOW else lit
    return (*out, lit2)


def augment(pair: SamplePair, seed: int, params: AugmentParams | None = None) -> SamplePair:
    inp, tgt, msk, lit = augment_arrays(pair.input, pair.target, pair.mask, pair.lighting,
                                        pair.kind, seed, params)
    bg = pair.background
    if bg is not None:
        p = params if params is not None else draw_augment(seed, *np.shape(pair.input)[:2])
        bg = apply_augment(bg, p) if not p.is_identity() else bg
    return SamplePair(inp, tgt, msk, lit, pair.kind, dict(pair.provenance), bg)
