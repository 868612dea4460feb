"""Image quality scores and evaluation reports.

``perceptual_proxy`` is a gradient-structure distance, not a learned
perceptual metric; its values are not comparable to published tables.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagecore import as_image, luma, resample_area

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def _window() -> np.ndarray:
    # fixed 11 taps rather than the 3-sigma radius used for blurring
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    g = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array."""
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim_map(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    x, y = luma(a), luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    g = _window()
    mx, my = _valid_filter(x, g), _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    return ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))


def ssim(a, b) -> float:
    """Luma SSIM (Gaussian 11x11 window, sigma 1.5), averaged over valid windows."""
    return float(np.mean(ssim_map(a, b)))


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def _grad_mag(y: np.ndarray) -> np.ndarray:
    gx = np.zeros_like(y)
    gy = np.zeros_like(y)
    gx[:, :-1] = y[:, 1:] - y[:, :-1]
    gy[:-1, :] = y[1:, :] - y[:-1, :]
    return np.sqrt(gx * gx + gy * gy)


def perceptual_proxy(a, b, octaves: int = 3) -> float:
    """Mean absolute difference of luma gradient magnitudes, averaged over octaves."""
    a, b = _check_pair(a, b)
    ya, yb = luma(a), luma(b)
    scores = []
    for k in range(octaves):
        scores.append(float(np.mean(np.abs(_grad_mag(ya) - _grad_mag(yb)))))
        if k + 1 < octaves:
            h, w = ya.shape
            nh, nw = max(1, h // 2), max(1, w // 2)
            ya = resample_area(ya[..., None], nw, nh)[..., 0].astype(np.float64)
            yb = resample_area(yb[..., None], nw, nh)[..., 0].astype(np.float64)
    return float(np.mean(scores))


def composite_then_score(pred, gt, gt_background, mask) -> tuple[np.ndarray, np.ndarray]:
    """Paste the prediction's foreground over the ground-truth background.

    Returns ``(pred', gt)``; every score should be computed on that pair.
    """
    pred, gt = _check_pair(pred, gt)
    bg = as_image(gt_background)
    m = as_image(mask, np.float32)
    if bg.shape != gt.shape or m.shape[:2] != gt.shape[:2]:
        raise ValueError("background and mask must match the prediction's dimensions")
    if np.all(m == 1.0):
        return pred.copy(), gt
    if np.all(m == 0.0):
        return bg.copy(), gt
    return (m * pred + (1.0 - m) * bg).astype(pred.dtype), gt


def consistency_report(scores) -> dict[str, float]:
    """Mean and population standard deviation."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("consistency needs at least 2 scores")
    mean = float(np.mean(s))
    return {"mean": mean, "std": float(np.sqrt(np.mean((s - mean) ** 2)))}


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class EvalReport:
    method: str
    manifest_hash: str
    rows: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, sample_id: str, pred, gt) -> dict:
        row = {"id": sample_id, "ssim": ssim(pred, gt), "psnr": psnr(pred, gt),
               "proxy": perceptual_proxy(pred, gt)}
        self.rows.append(row)
        return row

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for key in ("ssim", "psnr", "proxy"):
            v = np.array([r[key] for r in self.rows], dtype=np.float64)
            if len(v) == 0:
                out[key] = {"mean": math.nan, "std": math.nan}
            elif np.isfinite(v).all():
                out[key] = {"mean": float(np.mean(v)), "std": float(np.std(v))}
            else:  # psnr is +inf on exact matches
                out[key] = {"mean": float(np.mean(v)), "std": 0.0 if np.all(v == v[0]) else math.inf}
        return out

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "ssim", "psnr", "gradient_proxy"])
            for r in self.rows:
                w.writerow([r["id"], repr(r["ssim"]), repr(r["psnr"]), repr(r["proxy"])])
        summary = {"method": self.method, "manifest_sha256": self.manifest_hash,
                   "count": len(self.rows), "metadata": self.metadata,
                   "aggregates": {("gradient_proxy" if k == "proxy" else k): v
                                  for k, v in self.aggregates().items()},
                   "note": "gradient_proxy is a gradient-magnitude distance, not a learned perceptual metric"}
        json_path.write_text(json.dumps(summary, indent=2, allow_nan=True))
        return csv_path, json_path
