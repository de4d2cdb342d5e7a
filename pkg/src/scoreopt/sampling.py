"""Fitness-proportional training batches.

Candidate points come from a global uniform prior or local Gaussian priors
around current solutions.  Raw fitness is pushed through an exponential
transform whose temperature is calibrated so the resampling distribution has
a fixed spread, then batches are drawn by low-variance systematic resampling.
Local-prior pools additionally carry per-dimension debias loss weights that
flatten the sampling bias near the prior center.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .problems import Problem, raw_fitness

C_PSTD_DEFAULT = 0.5  # target std(p) * len(p) of the resampling distribution
MASS_DEFAULT = 0.9  # debias region holds this much prior mass
TEMP_LOG_BOUND = 30.0


class EmptyFeasibleError(RuntimeError):
    """No prior sample satisfied the problem constraints."""


@dataclass(frozen=True)
class LocalPrior:
    """Isotropic Gaussian prior N(center, per_dim_sd^2 I) with a debias radius.

    The radius r covers `mass` of each marginal, r = z * per_dim_sd with
    z the standard-normal quantile at (1 + mass)/2.
    """

    center: np.ndarray
    per_dim_sd: float
    r: float
    mass: float = MASS_DEFAULT

    @classmethod
    def around(cls, center: np.ndarray, per_dim_sd: float,
               mass: float = MASS_DEFAULT) -> "LocalPrior":
        if per_dim_sd <= 0:
            raise ValueError("per_dim_sd must be > 0")
        if not 0 < mass < 1:
            raise ValueError("mass must lie in (0, 1)")
        z = float(ndtri(0.5 + mass / 2.0))
        return cls(center=np.asarray(center, dtype=float),
                   per_dim_sd=float(per_dim_sd), r=z * float(per_dim_sd),
                   mass=mass)


@dataclass(frozen=True)
class FitnessPool:
    """Immutable candidate pool with calibrated resampling weights."""

    points: np.ndarray  # (N, n) in [-1, 1]^n
    raw: np.ndarray  # oriented fitness, NaN where infeasible
    feasible: np.ndarray
    temp: float
    weights: np.ndarray
    probs: np.ndarray
    flat: bool  # all feasible fitness equal; temperature pinned at the bound
    loss_weights: Optional[np.ndarray] = None  # (N, n) debias weights
    meta: dict = field(default_factory=dict)

    @property
    def feasible_fraction(self) -> float:
        return float(np.mean(self.feasible))


def _tp99(values: np.ndarray) -> float:
    """Nearest-rank 99th percentile (1-indexed rank ceil(0.99 N), ascending)."""
    srt = np.sort(values)
    rank = int(np.ceil(0.99 * len(srt)))
    return float(srt[max(rank - 1, 0)])


def transform_fitness(raw: np.ndarray, temp: float,
                      feasible: Optional[np.ndarray] = None) -> np.ndarray:
    """Exponential fitness weights exp((raw - TP99)/temp); infeasible get 0."""
    if temp <= 0:
        raise ValueError("temp must be > 0")
    raw = np.asarray(raw, dtype=float)
    if feasible is None:
        feasible = np.isfinite(raw)
    feasible = np.asarray(feasible, dtype=bool)
    if not feasible.any():
        raise EmptyFeasibleError("no feasible fitness values to transform")
    ref = _tp99(raw[feasible])
    weights = np.zeros(raw.shape)
    # top-percentile points exceed TP99; cap the exponent against overflow
    weights[feasible] = np.exp(np.minimum((raw[feasible] - ref) / temp, 700.0))
    return weights


def _spread_statistic(raw_feasible: np.ndarray, temp: float) -> float:
    w = np.exp(np.minimum((raw_feasible - _tp99(raw_feasible)) / temp, 700.0))
    p = w / w.sum()
    return float(np.std(p) * len(p))


def calibrate_temp(raw: np.ndarray, feasible: Optional[np.ndarray] = None,
                   c_pstd: float = C_PSTD_DEFAULT):
    """Bisect log-temperature so std(p)·len(p) hits c_pstd.

    The statistic decreases monotonically in temp (uniform limit), so plain
    bisection over log temp in [-30, 30] suffices.  Returns (temp, flat);
    flat pools (all feasible fitness equal) pin temp at e^30 since the
    statistic is identically 0.
    """
    raw = np.asarray(raw, dtype=float)
    if feasible is None:
        feasible = np.isfinite(raw)
    vals = raw[np.asarray(feasible, dtype=bool)]
    if vals.size == 0:
        raise EmptyFeasibleError("no feasible fitness values to calibrate")
    if vals.size < 2 or np.max(vals) == np.min(vals):
        return float(np.exp(TEMP_LOG_BOUND)), True
    lo, hi = -TEMP_LOG_BOUND, TEMP_LOG_BOUND
    if _spread_statistic(vals, np.exp(lo)) < c_pstd:
        return float(np.exp(lo)), False  # spread below target even at the bound
    if _spread_statistic(vals, np.exp(hi)) > c_pstd:
        return float(np.exp(hi)), False
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _spread_statistic(vals, np.exp(mid)) > c_pstd:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13:
            break
    return float(np.exp(0.5 * (lo + hi))), False


def resample_indices(probs: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Systematic (low-variance) resampling: one uniform offset, count strata."""
    probs = np.asarray(probs, dtype=float)
    total = probs.sum()
    if not total > 0:
        raise EmptyFeasibleError("all resampling weights are zero")
    positions = (rng.uniform() + np.arange(count)) / count
    idx = np.searchsorted(np.cumsum(probs / total), positions)
    return np.minimum(idx, len(probs) - 1)


def fitness_resample(pool: FitnessPool, count: int, rng: np.random.Generator) -> np.ndarray:
    return pool.points[resample_indices(pool.probs, count, rng)]


def uniform_prior(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(count, dim))


def local_prior_sample(prior: LocalPrior, count: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian draws around the prior center, kept inside the working box.

    Out-of-box coordinates are redrawn up to 16 times and then clamped; walls
    only matter when the center sits near a domain edge.
    """
    dim = prior.center.shape[0]
    draws = prior.center + prior.per_dim_sd * rng.standard_normal((count, dim))
    for _ in range(16):
        bad = np.abs(draws) > 1.0
        if not bad.any():
            break
        redraw = prior.center[np.newaxis, :] + prior.per_dim_sd * rng.standard_normal(draws.shape)
        draws = np.where(bad, redraw, draws)
    return np.clip(draws, -1.0, 1.0)


def debias_weights(x: np.ndarray, prior: LocalPrior) -> np.ndarray:
    """Per-dimension loss weights flattening the local prior inside |x-x*| <= r.

    The reweighted density w(x)·N(x; x*, s^2) is flat with total mass `mass`
    on the central band and keeps the Gaussian tails (weight 1) outside.
    """
    x = np.asarray(x, dtype=float)
    dev = x - prior.center
    s = prior.per_dim_sd
    pdf = np.exp(-0.5 * (dev / s) ** 2) / (s * np.sqrt(2.0 * np.pi))
    target = prior.mass / (2.0 * prior.r)
    return np.where(np.abs(dev) <= prior.r, target / pdf, 1.0)


def antithetic_noise(monte_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal batch arranged as interleaved pairs (eps, -eps)."""
    if monte_size % 2 != 0:
        raise ValueError("monte_size must be even")
    eps = rng.standard_normal((monte_size // 2, dim))
    batch = np.empty((monte_size, dim))
    batch[0::2] = eps
    batch[1::2] = -eps
    return batch


def build_training_pool(problem: Problem, pool_size: int, rng: np.random.Generator,
                        priors=None, c_pstd: float = C_PSTD_DEFAULT) -> FitnessPool:
    """Draw prior candidates, evaluate fitness, calibrate, and package a pool.

    `priors` may be None (global uniform), one LocalPrior, or a list of them;
    with several, the pool splits evenly across priors and each point's debias
    weights come from the prior that produced it.
    """
    if priors is None:
        points = uniform_prior(pool_size, problem.dim, rng)
        loss_weights = None
    else:
        prior_list = [priors] if isinstance(priors, LocalPrior) else list(priors)
        counts = np.full(len(prior_list), pool_size // len(prior_list))
        counts[: pool_size % len(prior_list)] += 1
        chunks, weight_chunks = [], []
        for prior, cnt in zip(prior_list, counts):
            pts = local_prior_sample(prior, int(cnt), rng)
            chunks.append(pts)
            weight_chunks.append(debias_weights(pts, prior))
        points = np.vstack(chunks)
        loss_weights = np.vstack(weight_chunks)
    raw, feasible = raw_fitness(problem, points)
    if not feasible.any():
        raise EmptyFeasibleError(
            f"no feasible point in a pool of {pool_size} for problem {problem.name!r}")
    temp, flat = calibrate_temp(raw, feasible, c_pstd)
    weights = transform_fitness(raw, temp, feasible)
    probs = weights / weights.sum()
    return FitnessPool(points=points, raw=raw, feasible=feasible, temp=temp,
                       weights=weights, probs=probs, flat=flat,
                       loss_weights=loss_weights,
                       meta={"feasible_fraction": float(np.mean(feasible))})
