"""Variance-exploding noise schedule with a geometric sigma(t)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    kind: str = "geometric-vesde"

    def __post_init__(self):
        if self.kind != "geometric-vesde":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min!r}, {self.sigma_max!r}"
            )

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, t):
        return sigma_at(self, t)

    def levels(self, n: int = 10) -> np.ndarray:
        """``n`` geometrically spaced noise levels from sigma_min to sigma_max."""
        return discrete_levels(self, n)


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


def sigma_at(sched: NoiseSchedule, t):
    """sigma(t) = sigma_min * (sigma_max / sigma_min) ** t."""
    t = _check_t(t)
    out = sched.sigma_min * np.exp(sched.log_ratio * t)
    return float(out) if out.ndim == 0 else out


def diffusion_coeff_sq(sched: NoiseSchedule, t):
    """g(t)^2 = d sigma(t)^2 / dt for the zero-drift forward SDE."""
    sig = np.asarray(sigma_at(sched, t))
    out = 2.0 * sig * sig * sched.log_ratio
    return float(out) if out.ndim == 0 else out


def discrete_levels(sched: NoiseSchedule, n: int = 10) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least two levels")
    return np.asarray(sigma_at(sched, np.linspace(0.0, 1.0, n)))


def perturb(x0, sigma, rng, z=None):
    """Forward-noise ``x0`` at level ``sigma``.

    Returns ``(x_t, z)`` with ``x_t = x0 + sigma * z``.  Passing ``z``
    explicitly skips the draw.  The conditional score is ``-z / sigma``.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    x0 = np.asarray(x0, dtype=float)
    if z is None:
        shape = np.broadcast_shapes(x0.shape, sigma.shape)
        z = np.random.default_rng(rng).standard_normal(shape)
    else:
        z = np.asarray(z, dtype=float)
    x_t = x0 + sigma * z
    if x_t.ndim == 0:
        return float(x_t), float(z)
    return x_t, z


def sample_times(n: int, rng, t_min: float = 0.0) -> np.ndarray:
    """Uniform training times on ``[t_min, 1]``."""
    return np.random.default_rng(rng).uniform(t_min, 1.0, size=n)
