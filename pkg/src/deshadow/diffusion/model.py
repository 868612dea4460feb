"""Conditioned noise prediction and the epsilon-matching training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule
from .unet import DenoiserParams, NonFiniteError, TinyUNet, find_nonfinite_layer


def to_model_range(img: np.ndarray) -> np.ndarray:
    """[0, 1] image values -> [-1, 1] model space."""
    return np.asarray(img, dtype=np.float32) * 2.0 - 1.0


def from_model_range(x: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(x) + 1.0) * 0.5, 0.0, 1.0).astype(np.float32)


@dataclass
class Conditioning:
    """Local (spatially aligned) and global inputs of the denoiser.

    ``local`` stacks the noisy image, the condition image and the mask along
    the channel axis, ``(N, H, W, 7)``.  ``lighting`` is the ``(N, 32, 32, 3)``
    lighting map.  Single-image arrays without the batch axis are accepted.
    """

    local: np.ndarray
    lighting: np.ndarray

    def __post_init__(self):
        local = np.asarray(self.local)
        lighting = np.asarray(self.lighting)
        if local.ndim == 3:
            local = local[None]
        if lighting.ndim == 3:
            lighting = lighting[None]
        mask = local[..., -1]
        if mask.size and (mask.min() < 0 or mask.max() > 1):
            raise ValueError("mask channel must lie in [0, 1]")
        self.local = local
        self.lighting = lighting

    @classmethod
    def build(cls, x_t: np.ndarray, cond_img: np.ndarray, mask: np.ndarray,
              lighting: np.ndarray) -> "Conditioning":
        """Stack model-space ``x_t`` and ``cond_img`` with a [0, 1] mask."""
        local = np.concatenate([x_t, cond_img, mask], axis=-1).astype(np.float32)
        return cls(local, lighting)


def denoise_predict(params: DenoiserParams, cond: Conditioning, t) -> np.ndarray:
    """Predicted noise for every item in ``cond``; same shape as ``x_t``."""
    n = cond.local.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    out, _ = TinyUNet(params.config).forward(params, cond.local, t_arr, cond.lighting)
    return out


@dataclass
class TrainBatch:
    """Training tuples in model space.

    x0, cond: (N, H, W, 3) in [-1, 1]; mask: (N, H, W, 1); lighting: (N, R, R, 3).
    """

    x0: np.ndarray
    cond: np.ndarray
    mask: np.ndarray
    lighting: np.ndarray

    def __len__(self) -> int:
        return self.x0.shape[0]


# test hook: replaces the network with ``predictor(x_t, batch, t, eps) -> eps_hat``
Predictor = Callable[[np.ndarray, TrainBatch, np.ndarray, np.ndarray], np.ndarray]


def loss_and_grad(params: DenoiserParams, batch: TrainBatch, sched: NoiseSchedule,
                  rng: np.random.Generator | None = None, t: np.ndarray | None = None,
                  eps: np.ndarray | None = None, predictor: Predictor | None = None):
    """Mean squared error between true and predicted noise, and its gradient.

    ``t`` and ``eps`` are drawn from ``rng`` per item unless given.
    Returns ``(loss, grads)``; ``grads`` is ``None`` when a predictor hook is used.
    """
    n = len(batch)
    if n < 1:
        raise ValueError("batch must contain at least one item")
    dtype = params.weights["out.w"].dtype
    if t is None:
        t = rng.integers(0, sched.T, size=n)
    if eps is None:
        eps = rng.standard_normal(batch.x0.shape)
    t = np.asarray(t)
    eps = np.asarray(eps, dtype=dtype)
    ab = sched.alpha_bar[t][:, None, None, None]
    x_t = (np.sqrt(ab) * batch.x0 + np.sqrt(1.0 - ab) * eps).astype(dtype)

    if predictor is not None:
        eps_hat = predictor(x_t, batch, t, eps)
        return float(np.mean((eps_hat.astype(np.float64) - eps) ** 2)), None

    local = np.concatenate([x_t, batch.cond.astype(dtype), batch.mask.astype(dtype)], axis=-1)
    light = batch.lighting.astype(dtype)
    net = TinyUNet(params.config)
    out, cache = net.forward(params, local, t, light)
    diff = out - eps
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not np.isfinite(loss):
        layer = find_nonfinite_layer(params, local, t, light) or "loss"
        raise NonFiniteError(layer, f"non-finite loss; first non-finite layer: {layer}")
    grads = net.backward(params, cache, (2.0 / diff.size) * diff)
    return loss, grads
