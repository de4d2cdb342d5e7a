"""Diffusion interpolant schedules, annealed t-sequences, and Gaussian kernels.

The forward process is x_t = alpha(t) * x + sigma(t) * eps with eps ~ N(0, I),
t running from 0 (clean data) to 1 (pure noise).  Everything downstream (score
conversions, smoothed-objective gradients, local priors) is expressed in terms
of (alpha, sigma) and their time derivatives, so alternative schedules can be
plugged in without touching other modules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class DegenerateKernelError(ValueError):
    """A Gaussian kernel collapsed: sigma(t) == 0 or alpha(t) == 0."""


@dataclass(frozen=True)
class Interpolant:
    """Schedule functions alpha, sigma and their derivatives dalpha, dsigma.

    Required boundary conditions: alpha(0) = 1, alpha(1) = 0, sigma(0) = 0,
    sigma(1) = 1, with alpha non-increasing and sigma non-decreasing.
    """

    name: str
    alpha: Callable[[float], float]
    sigma: Callable[[float], float]
    dalpha: Callable[[float], float]
    dsigma: Callable[[float], float]


def linear_interpolant() -> Interpolant:
    """The default schedule: alpha = 1 - t, sigma = t."""
    return Interpolant(
        name="linear",
        alpha=lambda t: 1.0 - t,
        sigma=lambda t: t + 0.0,
        dalpha=lambda t: -1.0 + 0.0 * t,
        dsigma=lambda t: 1.0 + 0.0 * t,
    )


@dataclass(frozen=True)
class TSequence:
    """Exponentially decreasing annealing scales t_0 = 1 > t_1 > ... > t_count.

    values[i+1] = gamma * values[i] exactly, values[count] == t_end to
    floating-point accuracy.
    """

    count: int
    t_end: float
    gamma: float
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.count + 1:
            raise ValueError("values must hold count + 1 entries")
        if self.values[0] != 1.0:
            raise ValueError("t-sequence must start at t = 1")


def build_t_sequence(tn: int, t_end: float) -> TSequence:
    """Geometric t-sequence with tn ratio steps from 1 down to t_end.

    gamma is derived from the endpoints: gamma = t_end ** (1 / tn).
    """
    if tn < 1:
        raise ValueError(f"tn must be >= 1, got {tn}")
    if not (0.0 < t_end < 1.0):
        raise ValueError(f"t_end must lie in (0, 1), got {t_end}")
    gamma = float(t_end ** (1.0 / tn))
    values = np.empty(tn + 1)
    values[0] = 1.0
    for i in range(tn):
        values[i + 1] = gamma * values[i]
    return TSequence(count=tn, t_end=t_end, gamma=gamma, values=values)


def _sq_norm(diff: np.ndarray) -> np.ndarray:
    diff = np.asarray(diff, dtype=float)
    if diff.ndim == 0:
        return diff**2
    return np.sum(diff * diff, axis=-1)


def log_forward_density(x_t, x, t, interp: Interpolant | None = None):
    """log N(x_t; alpha_t * x, sigma_t^2 I) of the forward kernel.

    Accepts single vectors or batches stacked on the leading axis.
    """
    interp = interp or linear_interpolant()
    sigma = float(interp.sigma(t))
    if sigma <= 0.0:
        raise DegenerateKernelError(f"sigma(t) = {sigma} at t = {t}; forward kernel degenerate")
    alpha = float(interp.alpha(t))
    x_t = np.asarray(x_t, dtype=float)
    x = np.asarray(x, dtype=float)
    n = x_t.shape[-1] if x_t.ndim else 1
    return -0.5 * n * np.log(2.0 * np.pi * sigma**2) - _sq_norm(x_t - alpha * x) / (2.0 * sigma**2)


def forward_density(x_t, x, t, interp: Interpolant | None = None):
    """N(x_t; alpha_t * x, sigma_t^2 I)."""
    return np.exp(log_forward_density(x_t, x, t, interp))


def log_inverse_density(x, x_t, t, interp: Interpolant | None = None):
    """log N(x; x_t / alpha_t, (sigma_t / alpha_t)^2 I) of the inverse kernel."""
    interp = interp or linear_interpolant()
    alpha = float(interp.alpha(t))
    if alpha <= 0.0:
        raise DegenerateKernelError(f"alpha(t) = {alpha} at t = {t}; inverse kernel undefined")
    sigma = float(interp.sigma(t))
    if sigma <= 0.0:
        raise DegenerateKernelError(f"sigma(t) = {sigma} at t = {t}; inverse kernel degenerate")
    s = sigma / alpha
    x = np.asarray(x, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    n = x.shape[-1] if x.ndim else 1
    return -0.5 * n * np.log(2.0 * np.pi * s**2) - _sq_norm(x - x_t / alpha) / (2.0 * s**2)


def inverse_density(x, x_t, t, interp: Interpolant | None = None):
    """N(x; x_t / alpha_t, (sigma_t / alpha_t)^2 I)."""
    return np.exp(log_inverse_density(x, x_t, t, interp))
