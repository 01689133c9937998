"""Diffusion noise schedules and the closed-form forward noising step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta sequence and cumulative signal products.

    ``betas`` has length T and is 1-indexed conceptually: ``betas[t-1]`` is the
    variance added at step t.  ``alpha_bars`` has length T+1 with
    ``alpha_bars[0] == 1`` and ``alpha_bars[t] = prod_{s<=t} (1 - beta_s)``,
    so the index t can be used directly.
    """

    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.T,):
            raise ValueError(f"betas must have shape ({self.T},), got {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("betas must lie strictly in (0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def signal_coeff(self, t) -> float:
        """sqrt(alpha_bar_t), the surviving signal fraction at step t."""
        return np.sqrt(self.alpha_bars[t])

    def noise_coeff(self, t) -> float:
        """sqrt(1 - alpha_bar_t), the accumulated noise scale at step t."""
        return np.sqrt(1.0 - self.alpha_bars[t])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule from beta_start at t=1 to beta_end at t=T."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(T=T, betas=betas)


def forward_noise(x0, t: int, eps, schedule: NoiseSchedule):
    """Noise x0 to step t in closed form: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.

    Works on numpy arrays and torch tensors alike; ``eps`` must follow the
    zero-mean unit-variance convention and match x0's shape.  t=0 returns x0.
    """
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t must lie in [0, {schedule.T}], got {t}")
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if t == 0:
        return x0
    abar = float(schedule.alpha_bars[t])
    # plain-float coefficients so float32 inputs stay float32 (numpy and torch)
    return float(np.sqrt(abar)) * x0 + float(np.sqrt(1.0 - abar)) * eps
