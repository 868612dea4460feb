from __future__ import annotations

import numpy as np

from .model import Conditioning, from_model_range
from .schedule import NoiseSchedule
from .unet import DenoiserParams, TinyUNet


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly strided descending timesteps from ``T - 1`` down to 0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    return np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(np.int64))[::-1]


def sample(params: DenoiserParams, cond_img: np.ndarray, mask: np.ndarray, lighting: np.ndarray,
           sched: NoiseSchedule, steps: int = 50, seed: int = 0) -> np.ndarray:
    """Deterministic DDIM sampling.

    ``cond_img`` is the [0, 1] condition image, ``mask`` its [0, 1] foreground
    mask and ``lighting`` the 32x32 lighting map; batched inputs (leading
    axis) are sampled together.  Returns images in [0, 1].
    """
    single = np.asarray(cond_img).ndim == 3
    cond = np.asarray(cond_img, dtype=np.float32)
    mask = np.asarray(mask, dtype=np.float32)
    lighting = np.asarray(lighting, dtype=np.float32)
    if single:
        cond, mask, lighting = cond[None], mask[None], lighting[None]
    cond = cond * 2.0 - 1.0
    dtype = params.weights["out.w"].dtype
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(cond.shape).astype(dtype)
    net = TinyUNet(params.config)
    ts = ddim_timesteps(sched.T, steps)
    for i, t in enumerate(ts):
        c = Conditioning.build(x, cond, mask, lighting)
        eps, _ = net.forward(params, c.local, np.full(len(x), t), c.lighting)
        ab = sched.alpha_bar[t]
        ab_prev = sched.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = np.clip((x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -1.0, 1.0)
        eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        x = (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps).astype(dtype)
    out = from_model_range(x)
    return out[0] if single else out
