"""Guided refinement: generated low frequencies plus input high frequencies.

The low band is an orthogonal projection, not a plain blur: on the
foreground it keeps the span of DCT modes below a cutoff set by ``sigma``
(the frequency where a Gaussian of that sigma halves the amplitude),
restricted to the modes that are mostly concentrated inside the mask.
Because it is a projection, splitting the refined image returns exactly
the generation's low band and exactly the input's high band.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .checkpoint import load_container, save_container
from .diffusion import layers as L
from .imagecore import as_image, gaussian_blur, resample_area, resize_bilinear

REFERENCE_RES = 256
REFERENCE_SIGMA = 3.0
REFINER_CHANNELS = 16


class RefineMode(str, enum.Enum):
    BASELINE = "baseline"
    LEARNED = "learned"


def default_sigma(res: int) -> float:
    return REFERENCE_SIGMA * res / REFERENCE_RES


@dataclass
class RefineConfig:
    sigma: float = REFERENCE_SIGMA
    mode: RefineMode = RefineMode.BASELINE
    learned_params: "RefinerParams | None" = None

    def __post_init__(self):
        self.mode = RefineMode(self.mode)
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.mode == RefineMode.LEARNED and self.learned_params is None:
            raise ValueError("learned mode needs learned_params")

    @classmethod
    def for_resolution(cls, res: int, **kw) -> "RefineConfig":
        return cls(sigma=default_sigma(res), **kw)


# --------------------------------------------------------------------------- low band


def _cutoff(n: int, sigma: float) -> int:
    """Number of DCT modes along an axis of length ``n`` kept for ``sigma``."""
    f_half = math.sqrt(math.log(2.0) / 2.0) / (math.pi * sigma)  # cycles / pixel
    return int(min(n, math.floor(2 * n * f_half) + 1))


def _dct_basis(n: int, k: int) -> np.ndarray:
    """Orthonormal DCT-II basis, first ``k`` modes as columns (n, k)."""
    x = np.arange(n) + 0.5
    b = np.cos(np.pi * np.outer(x, np.arange(k)) / n) * math.sqrt(2.0 / n)
    b[:, 0] /= math.sqrt(2.0)
    return b


@lru_cache(maxsize=32)
def _fg_basis(mask_bytes: bytes, h: int, w: int, sigma: float) -> np.ndarray:
    """Orthonormal basis (n_fg, r) of the low band restricted to the foreground."""
    fg = np.frombuffer(mask_bytes, dtype=bool).reshape(h, w)
    by = _dct_basis(h, _cutoff(h, sigma))
    bx = _dct_basis(w, _cutoff(w, sigma))
    ys, xs = np.nonzero(fg)
    b = (by[ys][:, :, None] * bx[xs][:, None, :]).reshape(len(ys), -1)
    u, s, _ = np.linalg.svd(b, full_matrices=False)
    # s^2 is the fraction of a mode's energy inside the mask; keep the concentrated ones
    return np.ascontiguousarray(u[:, s * s >= 0.5])


def low_band(img: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    """Projection of ``img`` onto the foreground low band; zero off the foreground."""
    img = as_image(img)
    h, w, _ = img.shape
    fg = as_image(mask)[..., 0] > 0
    out = np.zeros(img.shape, dtype=np.float64)
    if not fg.any():
        return out.astype(img.dtype)
    x = img.astype(np.float64)
    if fg.all():
        by = _dct_basis(h, _cutoff(h, sigma))
        bx = _dct_basis(w, _cutoff(w, sigma))
        coef = np.einsum("hk,hwc,wl->klc", by, x, bx)
        out = np.einsum("hk,klc,wl->hwc", by, coef, bx)
    else:
        u = _fg_basis(fg.tobytes(), h, w, float(sigma))
        v = x[fg]
        out[fg] = u @ (u.T @ v)
    return out.astype(img.dtype)


def split_band(img: np.ndarray, mask: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """(low, high) on the foreground; both zero elsewhere."""
    low = low_band(img, mask, sigma)
    fg = (as_image(mask)[..., 0] > 0)[..., None]
    return low, np.where(fg, as_image(img) - low, 0.0).astype(low.dtype)


# --------------------------------------------------------------------------- refine


def _match_generation(inp: np.ndarray, generation: np.ndarray) -> np.ndarray:
    gen = as_image(generation)
    h, w = inp.shape[:2]
    if gen.shape[:2] != (h, w):
        gen = resize_bilinear(gen, w, h)
    if gen.shape != inp.shape:
        raise ValueError(f"generation {gen.shape} does not match input {inp.shape} after upsampling")
    return gen


def _baseline(inp: np.ndarray, gen: np.ndarray, mask: np.ndarray, sigma: float) -> np.ndarray:
    # low(gen) + high(inp) == inp + low(gen - inp) by linearity of the projection
    fg = (as_image(mask)[..., 0] > 0)[..., None]
    delta = low_band(gen.astype(np.float64) - inp.astype(np.float64), mask, sigma)
    return np.where(fg, inp.astype(np.float64) + delta, inp.astype(np.float64))


def refine(inp: np.ndarray, generation: np.ndarray, mask: np.ndarray,
           cfg: RefineConfig | None = None) -> np.ndarray:
    """Generation low band + input high band on the foreground; background copied from input."""
    inp = as_image(inp)
    if inp.shape[2] != 3:
        raise ValueError("refine expects RGB images")
    cfg = cfg or RefineConfig.for_resolution(inp.shape[0])
    gen = _match_generation(inp, generation)
    m = as_image(mask)
    if m.shape[:2] != inp.shape[:2]:
        raise ValueError("mask must match the input's dimensions")
    base = _baseline(inp, gen, m, cfg.sigma)
    fg = (m[..., 0] > 0)[..., None]
    if cfg.mode == RefineMode.LEARNED:
        low_gen = low_band(gen, m, cfg.sigma)
        res = refiner_forward(cfg.learned_params, _refiner_input(inp, low_gen, m)[None])[0][0]
        base = base + np.where(fg, res, 0.0)
    out = np.where(fg, np.clip(base, 0.0, 1.0), inp).astype(inp.dtype)
    return out


def degrade(img: np.ndarray, seed: int, strength: float) -> np.ndarray:
    """Down-up resampling, then Gaussian blur, then additive noise; all scaled by ``strength``."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    img = as_image(img)
    if strength == 0.0:
        return img.copy()
    rng = np.random.default_rng([seed, 0xDE6])
    h, w = img.shape[:2]
    factor = max(1, int(round(4.0 * strength * rng.uniform(0.5, 1.0))))
    out = img
    if factor > 1:
        small = resample_area(img, max(1, w // factor), max(1, h // factor))
        out = resize_bilinear(small, w, h)
    out = gaussian_blur(out, 2.0 * strength * rng.uniform(0.5, 1.0))
    noise = rng.standard_normal(out.shape) * (0.05 * strength * rng.uniform(0.5, 1.0))
    return (out + noise).astype(img.dtype)


# --------------------------------------------------------------------------- learned residual


@dataclass
class RefinerParams:
    weights: dict[str, np.ndarray]
    channels: int = REFINER_CHANNELS

    def arch(self) -> dict:
        return {"net": "refiner", "in_channels": 7, "channels": self.channels, "layers": 3}

    def arch_hash(self) -> str:
        return hashlib.sha256(("refiner:" + json.dumps(self.arch(), sort_keys=True)).encode()).hexdigest()

    def copy(self) -> "RefinerParams":
        return RefinerParams({k: v.copy() for k, v in self.weights.items()}, self.channels)

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}


def init_refiner(seed: int = 0, channels: int = REFINER_CHANNELS) -> RefinerParams:
    """He-initialised hidden layers; zero output layer, so the residual starts at 0."""
    rng = np.random.default_rng(seed)
    shapes = [(7, channels), (channels, channels), (channels, 3)]
    weights = {}
    for i, (cin, cout) in enumerate(shapes):
        std = math.sqrt(2.0 / (9 * cin)) if i < 2 else 0.0
        weights[f"c{i}.w"] = (rng.normal(0.0, 1.0, (3, 3, cin, cout)) * std).astype(np.float32)
        weights[f"c{i}.b"] = np.zeros(cout, np.float32)
    return RefinerParams(weights, channels)


def _refiner_input(inp, low_gen, mask) -> np.ndarray:
    return np.concatenate([inp, low_gen, mask[..., :1]], axis=-1).astype(np.float32)


def refiner_forward(params: RefinerParams, x: np.ndarray):
    caches = []
    h = x
    for i in range(3):
        h, c = L.conv3x3_forward(h, params.weights[f"c{i}.w"], params.weights[f"c{i}.b"])
        caches.append(c)
        if i < 2:
            h, s = L.silu_forward(h)
            caches.append(s)
    return h, caches


def refiner_backward(params: RefinerParams, caches, dout: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    d = dout
    for i in reversed(range(3)):
        if i < 2:
            d = L.silu_backward(d, caches[2 * i + 1])
        d, grads[f"c{i}.w"], grads[f"c{i}.b"] = L.conv3x3_backward(d, caches[2 * i], params.weights[f"c{i}.w"])
    return grads


def _grad_xy(y: np.ndarray):
    gx = np.zeros_like(y)
    gy = np.zeros_like(y)
    gx[:, :, :-1] = y[:, :, 1:] - y[:, :, :-1]
    gy[:, :-1] = y[:, 1:] - y[:, :-1]
    return gx, gy


def _grad_xy_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    d = np.zeros_like(gx)
    d[:, :, 1:] += gx[:, :, :-1]
    d[:, :, :-1] -= gx[:, :, :-1]
    d[:, 1:] += gy[:, :-1]
    d[:, :-1] -= gy[:, :-1]
    return d


def refiner_loss(pred: np.ndarray, target: np.ndarray, grad_weight: float = 1.0):
    """L2 on pixels plus L2 on finite-difference gradients; returns (loss, dloss/dpred)."""
    diff = pred - target
    n = diff.size
    px, py = _grad_xy(pred)
    tx, ty = _grad_xy(target)
    ex, ey = px - tx, py - ty
    loss = float(np.sum(diff * diff) / n + grad_weight * (np.sum(ex * ex) + np.sum(ey * ey)) / n)
    dpred = (2.0 / n) * diff + grad_weight * (2.0 / n) * _grad_xy_adjoint(ex, ey)
    return loss, dpred.astype(pred.dtype)


@dataclass
class RefineTriple:
    clean: np.ndarray  # input portrait carrying the fine detail
    degraded: np.ndarray  # stand-in for a generation: shadow-free but degraded
    target: np.ndarray  # shadow-free image with the original detail
    mask: np.ndarray


def make_triples(inputs, targets, masks, seed: int = 0, strength: float = 0.7) -> list[RefineTriple]:
    return [RefineTriple(inp, degrade(tgt, seed + i, strength), tgt, m)
            for i, (inp, tgt, m) in enumerate(zip(inputs, targets, masks))]


def train_refiner(triples: list[RefineTriple], cfg: RefineConfig, steps: int = 300, lr: float = 1e-3,
                  batch: int = 4, seed: int = 0, ema_decay: float = 0.99, init: RefinerParams | None = None,
                  log_path: str | Path | None = None) -> RefinerParams:
    """Fit the residual so that baseline + residual matches the target (EMA weights returned)."""
    from .diffusion.train import Adam

    if not triples:
        raise ValueError("train_refiner needs at least one triple")
    params = init.copy() if init is not None else init_refiner(seed)
    if steps == 0:
        return params
    base, xin, tgt, fgm = [], [], [], []
    for t in triples:
        inp = as_image(t.clean)
        gen = _match_generation(inp, t.degraded)
        m = as_image(t.mask)
        base.append(_baseline(inp, gen, m, cfg.sigma))
        xin.append(_refiner_input(inp, low_band(gen, m, cfg.sigma), m))
        tgt.append(as_image(t.target))
        fgm.append((m[..., :1] > 0).astype(np.float32))
    base, xin, tgt, fgm = (np.stack(a).astype(np.float32) for a in (base, xin, tgt, fgm))
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr)
    ema = params.copy()
    rows = []
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(triples), size=batch)
        res, caches = refiner_forward(params, xin[idx])
        pred = base[idx] + fgm[idx] * res
        loss, dpred = refiner_loss(pred, tgt[idx])
        grads = refiner_backward(params, caches, dpred * fgm[idx])
        opt.step(params, grads)
        for k, w in params.weights.items():
            ema.weights[k] *= ema_decay
            ema.weights[k] += (1.0 - ema_decay) * w
        rows.append((step, loss))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss", "lr", "stage"])
            for s, l in rows:
                wr.writerow([s, repr(l), repr(lr), "refiner"])
    return ema


def save_refiner(path: str | Path, params: RefinerParams, meta: dict | None = None) -> None:
    save_container(path, params.arch(), params.arch_hash(), {"weights": params.weights}, meta or {})


def load_refiner(path: str | Path) -> RefinerParams:
    arch, arch_hash, sections, _ = load_container(path)
    if arch.get("net") != "refiner":
        raise ValueError(f"{path}: not a refiner checkpoint")
    params = RefinerParams(sections["weights"], arch["channels"])
    if params.arch_hash() != arch_hash:
        raise ValueError(f"{path}: architecture hash mismatch")
    return params
