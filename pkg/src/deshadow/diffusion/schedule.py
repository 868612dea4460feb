from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Fixed variance schedule; all arrays are float64 of length ``T``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def with_alpha_bar(self, alpha_bar) -> "NoiseSchedule":
        """Copy with overridden cumulative products (test hook for limit cases)."""
        ab = np.asarray(alpha_bar, dtype=np.float64)
        return NoiseSchedule(self.beta, self.alpha, ab)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with cumulative signal retention ``alpha_bar``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def forward_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Draw ``x_t`` from ``q(x_t | x_0)`` given the noise ``eps``."""
    if not 0 <= t < sched.T:
        raise IndexError(f"timestep {t} outside schedule of length {sched.T}")
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bar[t]
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0.dtype, np.float32), copy=False)
