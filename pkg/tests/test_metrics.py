from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deshadow.imagecore import gaussian_blur
from deshadow.metrics import (EvalReport, composite_then_score, consistency_report, file_sha256,
                              perceptual_proxy, psnr, ssim)


def naive_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Per-window SSIM with an explicit 2-D Gaussian weight, looping over positions."""
    x = 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]
    y = 0.299 * b[..., 0] + 0.587 * b[..., 1] + 0.114 * b[..., 2]
    t = np.arange(11) - 5
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * 1.5**2))
    g /= g.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            wx, wy = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = np.sum(g * wx), np.sum(g * wy)
            vx = np.sum(g * (wx - mx) ** 2)
            vy = np.sum(g * (wy - my) ** 2)
            cxy = np.sum(g * (wx - mx) * (wy - my))
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def textured(n=32, seed=0):
    r = np.random.default_rng(seed)
    return gaussian_blur(r.random((n, n, 3)), 0.7)


def test_ssim_identity_is_exactly_one(rng):
    x = rng.random((32, 32, 3))
    assert ssim(x, x) == 1.0


def test_ssim_anticorrelated_binary_is_negative(rng):
    x = (rng.random((32, 32, 3)) > 0.5).astype(np.float64)
    assert ssim(x, 1 - x) < 0


def test_ssim_matches_naive_window_oracle(rng):
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    assert abs(ssim(a, b) - naive_ssim(a, b)) <= 1e-10
    c = textured(32, 1)
    assert abs(ssim(c, gaussian_blur(c, 1.0)) - naive_ssim(c, gaussian_blur(c, 1.0))) <= 1e-10


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 15, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


@given(arrays(np.float64, (12, 13, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (12, 13, 3), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) <= 1e-12
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    if not np.array_equal(a, b) and s == 1.0:
        # equality is only allowed when every window has identical statistics
        assert np.allclose(a @ [0.299, 0.587, 0.114], b @ [0.299, 0.587, 0.114], atol=1e-6)


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_proxy_zero_cases(rng):
    x = textured(32, 2)
    assert perceptual_proxy(x, x) == 0.0
    flat = np.full((32, 32, 3), 0.4)
    assert perceptual_proxy(flat, flat + 0.1) == pytest.approx(0.0, abs=1e-15)


def test_proxy_orders_blur_strength():
    x = textured(64, 3)
    strong = perceptual_proxy(gaussian_blur(x, 2.0), x)
    weak = perceptual_proxy(gaussian_blur(x, 0.5), x)
    assert strong > weak > 0


@given(arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1)),
       arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1)))
def test_proxy_is_pseudometric(a, b, c):
    ab = perceptual_proxy(a, b)
    assert ab >= 0 and perceptual_proxy(a, a) == 0
    assert abs(ab - perceptual_proxy(b, a)) <= 1e-12
    assert ab <= perceptual_proxy(a, c) + perceptual_proxy(c, b) + 1e-12


def test_composite_then_score_cases(rng):
    pred, gt, bg = (rng.random((8, 8, 3)) for _ in range(3))
    p0, g0 = composite_then_score(pred, gt, bg, np.zeros((8, 8, 1)))
    np.testing.assert_array_equal(p0, bg)
    assert g0 is not None and np.array_equal(g0, gt)
    p1, _ = composite_then_score(pred, gt, bg, np.ones((8, 8, 1)))
    np.testing.assert_array_equal(p1, pred)
    half = np.zeros((8, 8, 1))
    half[:, :4] = 1
    ph, _ = composite_then_score(pred, gt, bg, half)
    np.testing.assert_array_equal(ph[:, :4], pred[:, :4])
    np.testing.assert_array_equal(ph[:, 4:], bg[:, 4:])
    with pytest.raises(ValueError):
        composite_then_score(pred, gt, bg[:4], half)


def two_pass_std(v):
    mean = sum(v) / len(v)
    return math.sqrt(sum((x - mean) ** 2 for x in v) / len(v))


def test_consistency_report(rng):
    r = consistency_report([0.8, 0.8, 0.8])
    assert r["mean"] == pytest.approx(0.8, abs=1e-15) and r["std"] == pytest.approx(0.0, abs=1e-15)
    assert consistency_report([0.0, 1.0])["std"] == 0.5
    v = rng.random(10).tolist()
    assert abs(consistency_report(v)["std"] - two_pass_std(v)) <= 1e-12
    with pytest.raises(ValueError):
        consistency_report([0.5])


def test_eval_report_files(tmp_path, rng):
    (tmp_path / "m.json").write_text("{}")
    h = file_sha256(tmp_path / "m.json")
    rep = EvalReport("full", h, metadata={"resolution": 32})
    for i in range(3):
        x = rng.random((16, 16, 3))
        rep.add(f"s{i}", x, np.clip(x + 0.05, 0, 1))
    agg = rep.aggregates()
    assert all(agg[k]["std"] >= 0 for k in agg)
    csv_path, json_path = rep.write(tmp_path)
    rows = list(csv.DictReader(open(csv_path)))
    assert len(rows) == 3 and "gradient_proxy" in rows[0]
    summary = json.loads(json_path.read_text())
    assert summary["manifest_sha256"] == h and summary["count"] == 3
    text = csv_path.read_text() + json_path.read_text()
    assert "lpips" not in text.lower()


def test_eval_report_exact_matches_have_infinite_psnr(rng):
    rep = EvalReport("gt", "0" * 64)
    for i in range(2):
        x = rng.random((16, 16, 3))
        rep.add(f"s{i}", x, x)
    agg = rep.aggregates()
    assert agg["ssim"] == {"mean": 1.0, "std": 0.0}
    assert agg["psnr"] == {"mean": math.inf, "std": 0.0}
