"""Variance-exploding noise schedule and Tweedie's formula."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric schedule sigma(t) = sigma_min * (sigma_max / sigma_min) ** t."""

    sigma_min: float = 0.01
    sigma_max: float = 5.0
    num_steps: int = 64

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ConfigurationError("need 0 < sigma_min < sigma_max")
        if self.num_steps < 1:
            raise ConfigurationError("num_steps must be positive")

    def sigma(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def time_grid(self) -> np.ndarray:
        """t_0 = 1 > t_1 > ... > t_N = 0."""
        return np.linspace(1.0, 0.0, self.num_steps + 1)

    def sigma_grid(self) -> np.ndarray:
        return self.sigma(self.time_grid())

    def sample_time(self, rng: np.random.Generator, size=None) -> np.ndarray:
        # uniform t is uniform in log-sigma over [sigma_min, sigma_max]
        return rng.random(size)


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    t: float
    sigma_t: float
    eta: np.ndarray


def forward_noise(x0, t, sched: NoiseSchedule, rng: np.random.Generator) -> NoisySample:
    """x_t = x0 + sigma(t) * eta with eta ~ N(0, I); the draw is kept."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    sigma = float(sched.sigma(t))
    eta = rng.standard_normal(x0.shape)
    return NoisySample(x0 + sigma * eta, float(t), sigma, eta)


def score_from_denoiser(denoised, x_t, sigma_t):
    """Tweedie: grad log p_t(x_t) = (E[x0 | x_t] - x_t) / sigma_t**2."""
    sigma_t = np.asarray(sigma_t, dtype=np.float64)
    if np.any(sigma_t <= 0):
        raise ZeroDivisionError("score undefined at sigma_t <= 0")
    if sigma_t.ndim:
        sigma_t = sigma_t[..., None]
    return (np.asarray(denoised) - np.asarray(x_t)) / sigma_t ** 2
