"""NHWC layer primitives with explicit forward/backward passes.

Each ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 3x3 convolution.  ``x``: (N,H,W,Cin), ``w``: (3,3,Cin,Cout)."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, wd, 3, 3, c), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki : ki + h, kj : kj + wd, :]
    cols = cols.reshape(n * h * wd, 9 * c)
    y = cols @ w.reshape(9 * c, -1)
    y += b
    return y.reshape(n, h, wd, -1), (cols, x.shape)


def conv3x3_backward(dy: np.ndarray, cache, w: np.ndarray):
    cols, (n, h, wd, c) = cache
    dy2 = dy.reshape(n * h * wd, -1)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(9 * c, -1).T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dy.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki : ki + h, kj : kj + wd, :] += dcols[:, :, :, ki, kj, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def silu_forward(x: np.ndarray):
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # logistic without exp overflow
    return x * s, (x, s)


def silu_backward(dy: np.ndarray, cache):
    x, s = cache
    return dy * (s * (1.0 + x * (1.0 - s)))


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def avgpool2_forward(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool2_backward(dy: np.ndarray) -> np.ndarray:
    return upsample2_forward(dy) * 0.25


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    n, h, w, c = dy.shape
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb.astype(dtype)
