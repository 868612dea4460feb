from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deshadow.envmap import tonemap
from deshadow.olat import relight
from deshadow.shadowsim import (Camera, GeometryMaps, OccluderSpec, PointLight, cast_shadow,
                                random_occlusion, visibility, visibility_map)


def segment_sampling_oracle(pts: np.ndarray, light: PointLight, occ: OccluderSpec,
                            samples: int = 1000) -> np.ndarray:
    """Hard visibility by testing 1000 points along each segment for containment."""
    t = (np.arange(samples) + 0.5) / samples
    flat = pts.reshape(-1, 3)
    seg = flat[:, None, :] + t[None, :, None] * (light.position - flat)[:, None, :]
    blocked = occ.contains(seg).any(axis=1)
    return np.where(blocked, 0.0, 1.0).reshape(pts.shape[:-1])


def flat_geometry(n: int = 3, z: float = 1.0) -> GeometryMaps:
    depth = np.full((n, n, 1), z, np.float32)
    normal = np.zeros((n, n, 3), np.float32)
    normal[..., 0:2] = 0.5  # (0, 0, -1) encoded
    return GeometryMaps(depth, normal, Camera(n, n, (n - 1) / 2, (n - 1) / 2))


def test_geometry_round_trip(tmp_path, small_scene):
    _, _, geom = small_scene
    geom.save(tmp_path / "g")
    back = GeometryMaps.load(tmp_path / "g")
    assert back.depth.tobytes() == geom.depth.tobytes()
    assert back.camera == geom.camera
    assert {p.name for p in (tmp_path / "g").iterdir()} == {"depth.pfm", "normal.pfm", "camera.json"}


def test_geometry_invariants(small_scene):
    _, olat, geom = small_scene
    fg = olat.alpha[..., 0] > 0
    raw = geom.normal.astype(np.float64)[fg] * 2 - 1
    assert np.abs(np.linalg.norm(raw, axis=-1) - 1).max() <= 1e-2
    assert np.all(geom.depth[fg] > 0)


def test_point_light_validation():
    with pytest.raises(ValueError):
        PointLight([0, 0, 0], float("inf"))
    with pytest.raises(ValueError):
        PointLight([0, 0, 0], 1.0, (-1.0, 0.0, 0.0))


def test_occluder_validation():
    with pytest.raises(ValueError):
        OccluderSpec("cone", [0, 0, 1], 0.1)
    with pytest.raises(ValueError):
        OccluderSpec("sphere", [0, 0, 1], 0.0)


def test_empty_blob_never_blocks(small_scene):
    _, _, geom = small_scene
    occ = OccluderSpec("blob", [0, 0, 0.5], 0.2, lobes=0)
    assert np.all(visibility_map(geom, PointLight([0.2, -0.3, 0.0]), occ) == 1.0)


def test_sphere_on_segment_midpoint_blocks():
    geom = flat_geometry()
    light = PointLight([0.3, -0.2, 0.0])
    p = geom.points()[1, 1]
    occ = OccluderSpec("sphere", (p + light.position) / 2, 0.05)
    assert visibility(geom, light, occ, 1, 1) == 0.0
    assert visibility(geom, light, occ, 1, 1, r_soft=0.1) == 0.0


def test_visibility_rejects_bad_pixels():
    geom = flat_geometry()
    occ = OccluderSpec("sphere", [0, 0, 0.5], 0.05)
    with pytest.raises(IndexError):
        visibility(geom, PointLight([0, 0, 0]), occ, 3, 0)
    geom.depth[0, 0] = 0
    with pytest.raises(ValueError):
        visibility(geom, PointLight([0, 0, 0]), occ, 0, 0)


def test_hard_visibility_matches_segment_sampling(small_scene):
    _, olat, geom = small_scene
    fg = olat.alpha[..., 0] > 0
    pts = geom.points()[fg]
    agree = total = 0
    for seed in range(12):
        light, occ, _ = random_occlusion(seed, difficulty=0.8)
        ours = visibility_map(geom, light, occ)[fg]
        oracle = segment_sampling_oracle(pts, light, occ)
        agree += int(np.sum(ours == oracle))
        total += len(ours)
    assert agree / total >= 0.999


def test_soft_visibility_is_monotone_in_penumbra(small_scene):
    _, _, geom = small_scene
    light, occ, _ = random_occlusion(3, difficulty=1.0)
    occ = OccluderSpec("sphere", occ.center, occ.size)
    hard = visibility_map(geom, light, occ)
    soft = visibility_map(geom, light, occ, r_soft=0.02)
    softer = visibility_map(geom, light, occ, r_soft=0.05)
    assert np.all(soft <= hard) and np.all(softer <= soft + 1e-12)
    assert np.all((soft >= 0) & (soft <= 1))


def test_cast_shadow_unoccluded_is_identity(small_scene, rng):
    _, olat, geom = small_scene
    img = rng.random((32, 32, 3)).astype(np.float32)
    light, occ, amb = random_occlusion(0)
    out = cast_shadow(img, olat.alpha, geom, light, occ, amb, vis=np.ones((32, 32)))
    assert out["shadowed"].tobytes() == img.tobytes()
    assert np.all(out["shadow_mask"] == 0)


def test_cast_shadow_full_occlusion_frontal():
    geom = flat_geometry()
    img = np.random.default_rng(0).random((3, 3, 3)).astype(np.float32)
    light = PointLight([0.0, 0.0, -1e7])
    occ = OccluderSpec("sphere", [0, 0, -10], 0.1)
    out = cast_shadow(img, np.ones((3, 3, 1)), geom, light, occ, 0.3, vis=np.zeros((3, 3)))
    np.testing.assert_allclose(out["shadowed"], 0.3 * img, atol=1e-6)


def test_cast_shadow_keeps_background_and_rejects_ambient(small_scene, rng):
    _, olat, geom = small_scene
    img = rng.random((32, 32, 3)).astype(np.float32)
    light, occ, _ = random_occlusion(4, difficulty=1.0)
    out = cast_shadow(img, olat.alpha, geom, light, occ, 0.2)
    bg = olat.alpha[..., 0] == 0
    np.testing.assert_array_equal(out["shadowed"][bg], img[bg])
    with pytest.raises(ValueError):
        cast_shadow(img, olat.alpha, geom, light, occ, 1.0)


@given(seed=st.integers(0, 5000), difficulty=st.floats(0, 1), r_soft=st.sampled_from([0.0, 0.01, 0.03]))
@settings(max_examples=25)
def test_cast_shadow_never_brightens(small_scene, env_library, seed, difficulty, r_soft):
    _, olat, geom = small_scene
    img = tonemap(relight(olat, env_library[seed % len(env_library)])).astype(np.float32)
    light, occ, amb = random_occlusion(seed, difficulty)
    out = cast_shadow(img, olat.alpha, geom, light, occ, amb, r_soft=r_soft)
    fg = olat.alpha[..., 0] > 0
    s, sm = out["shadowed"][fg], out["shadow_mask"][fg][:, 0]
    assert np.all(s <= img[fg] + 1e-6)
    same = np.all(np.abs(s - img[fg]) <= 1e-6, axis=-1)
    # pixels with zero image value cannot show a change even when occluded
    visible = img[fg].max(axis=-1) > 1e-6
    np.testing.assert_array_equal(same[visible], (sm == 0)[visible])


@given(seed=st.integers(0, 5000), factor=st.floats(0.8, 1.25))
@settings(max_examples=25)
def test_hard_mask_invariant_under_scaling_about_light(small_scene, seed, factor):
    _, olat, geom = small_scene
    light, occ, amb = random_occlusion(seed, 0.7)
    moved = occ.scaled_about(light.position, factor)
    if not moved.is_between(light):
        return
    img = np.ones((32, 32, 3), np.float32)
    a = cast_shadow(img, olat.alpha, geom, light, occ, amb)["shadow_mask"]
    b = cast_shadow(img, olat.alpha, geom, light, moved, amb)["shadow_mask"]
    np.testing.assert_array_equal(a, b)


@given(seed=st.integers(0, 5000), shift=st.floats(-0.1, 0.1))
@settings(max_examples=25)
def test_hard_mask_invariant_under_translation_towards_distant_light(small_scene, seed, shift):
    _, olat, geom = small_scene
    _, occ, amb = random_occlusion(seed, 0.7)
    direction = np.array([0.2, -0.3, -1.0])
    direction /= np.linalg.norm(direction)
    light = PointLight(occ.center + 1e6 * direction)
    img = np.ones((32, 32, 3), np.float32)
    a = cast_shadow(img, olat.alpha, geom, light, occ, amb)["shadow_mask"]
    b = cast_shadow(img, olat.alpha, geom, light, occ.translated(shift * direction), amb)["shadow_mask"]
    np.testing.assert_array_equal(a, b)


def test_random_occlusion_deterministic_and_valid():
    for seed in range(30):
        l1, o1, a1 = random_occlusion(seed, 0.4)
        l2, o2, a2 = random_occlusion(seed, 0.4)
        assert np.array_equal(l1.position, l2.position) and np.array_equal(o1.center, o2.center)
        assert o1.kind == o2.kind and o1.size == o2.size and a1 == a2
        assert o1.is_between(l1)


def test_difficulty_extremes(small_scene):
    _, olat, geom = small_scene
    fg = olat.alpha[..., 0] > 0
    coverage, amb0, amb1 = [], [], []
    for seed in range(100):
        light, occ, amb = random_occlusion(seed, 0.0)
        amb0.append(amb)
        coverage.append(float(np.mean(visibility_map(geom, light, occ)[fg] < 1)))
        amb1.append(random_occlusion(seed, 1.0)[2])
    assert min(amb0) >= 0.6
    assert np.mean(coverage) < 0.10
    assert max(amb1) <= 0.25
