"""Hierarchical outer loop: annealed Monte Carlo gradient ascent on log P(x,t).

Per scale t_i: build a fitness pool, train/finetune the vector field at t_i,
then move each solution uphill with the sigma-scaled score gradient.  The
first scale (t=1) is pure initialization — the gradient there is identically
zero, but the posterior mean under the model is the fitness-weighted
barycenter, which is a better start than a uniform draw.  Quadrature oracles
for 1-D problems and the Gaussian-homotopy estimator live here too; both
exist to cross-check the main gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import logsumexp

from .problems import Problem, raw_fitness
from .sampling import (C_PSTD_DEFAULT, LocalPrior, antithetic_noise,
                       build_training_pool)
from .schedule import Interpolant, TSequence, linear_interpolant
from .scorefield import TrainConfig, sigma_score, posterior_mean, train_flow_matching


class OptimizationAborted(RuntimeError):
    """Run stopped mid-schedule; carries the scale index and trace so far."""

    def __init__(self, message: str, scale_index: int, trace: list):
        super().__init__(f"{message} (scale {scale_index})")
        self.scale_index = scale_index
        self.trace = trace


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GradConfig:
    """Monte Carlo ascent knobs."""

    monte_size: int = 128
    lr: float = 1e-2
    max_steps: int = 200
    tol: float = 1e-4  # infinity-norm of the applied step

    def __post_init__(self):
        if self.monte_size < 2 or self.monte_size % 2 != 0:
            raise ValueError("monte_size must be even and >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


@dataclass(frozen=True)
class ExploreConfig:
    """Parallel-exploration schedules, linear in the scale index."""

    keep_size: tuple = (4, 8)
    explore_time: tuple = (4, 2)
    kappa: float = 1.0

    def __post_init__(self):
        if min(self.keep_size) < 1:
            raise ValueError("keep_size must be >= 1")
        if min(self.explore_time) < 0:
            raise ValueError("explore_time must be >= 0")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")

    def _interp(self, pair, i: int, total: int) -> int:
        frac = i / total if total > 0 else 1.0
        return int(round(pair[0] + (pair[1] - pair[0]) * frac))

    def keep_at(self, i: int, total: int) -> int:
        return self._interp(self.keep_size, i, total)

    def explore_at(self, i: int, total: int) -> int:
        return self._interp(self.explore_time, i, total)


@dataclass
class OptState:
    """Mutable run state: current solution set and the trace accumulated so far."""

    solutions: list = field(default_factory=list)  # vectors in [-1,1]^n
    scale_index: int = 0
    trace: list = field(default_factory=list)  # dict rows, see cli docs
    history: list = field(default_factory=list)  # (scale, stacked solutions) snapshots
    rng: Optional[np.random.Generator] = None


# ---------------------------------------------------------------------------
# Monte Carlo gradients


def _sigma_score_terms(source, x_t: np.ndarray, t: float,
                       interp: Optional[Interpolant] = None) -> np.ndarray:
    """Per-sample sigma_t * score(x_t, t) rows from any score source.

    Velocity models use the division-free form; plain score oracles
    (e.g. quadrature) are just scaled by sigma_t.
    """
    if hasattr(source, "velocity"):
        return sigma_score(source.velocity(x_t, t), x_t, t, interp)
    interp = interp or linear_interpolant()
    return interp.sigma(t) * source.score(x_t, t)


def _check_finite(terms: np.ndarray, eps: np.ndarray, t: float):
    bad = ~np.all(np.isfinite(terms), axis=-1)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise RuntimeError(
            f"non-finite score at t={t} for noise row {k}: eps={eps[k]}")


def mc_gradient(source, x: np.ndarray, t: float, monte_size: int = 128,
                rng: Optional[np.random.Generator] = None,
                eps: Optional[np.ndarray] = None,
                interp: Optional[Interpolant] = None) -> np.ndarray:
    """alpha_t * E_eps[score(alpha_t x + sigma_t eps)] over an antithetic batch.

    At t=1 this is exactly zero (alpha_1 = 0) regardless of the model.
    Pass `eps` to pin the batch (identity tests); otherwise `rng` draws one.
    """
    interp = interp or linear_interpolant()
    x = np.asarray(x, dtype=float)
    if eps is None:
        if rng is None:
            raise ValueError("either eps or rng is required")
        eps = antithetic_noise(monte_size, x.shape[-1], rng)
    a, s = interp.alpha(t), interp.sigma(t)
    x_t = a * x + s * eps
    terms = _sigma_score_terms(source, x_t, t, interp)
    _check_finite(terms, eps, t)
    return (a / s) * terms.mean(axis=0)


def stable_mc_gradient(source, x: np.ndarray, t: float, monte_size: int = 128,
                       rng: Optional[np.random.Generator] = None,
                       eps: Optional[np.ndarray] = None,
                       interp: Optional[Interpolant] = None) -> np.ndarray:
    """E_eps[sigma_t * score(x_t)] — the ascent direction actually used.

    Identical to (sigma_t/alpha_t) * mc_gradient on the same batch; the
    rescaling keeps the step size t-uniform so one learning rate serves the
    whole schedule, and the t=1 degeneracy disappears.
    """
    interp = interp or linear_interpolant()
    x = np.asarray(x, dtype=float)
    if eps is None:
        if rng is None:
            raise ValueError("either eps or rng is required")
        eps = antithetic_noise(monte_size, x.shape[-1], rng)
    a, s = interp.alpha(t), interp.sigma(t)
    x_t = a * x + s * eps
    terms = _sigma_score_terms(source, x_t, t, interp)
    _check_finite(terms, eps, t)
    return terms.mean(axis=0)


def initialize_first_scale(model, monte_size: int, rng: np.random.Generator,
                           interp: Optional[Interpolant] = None) -> np.ndarray:
    """Antithetic average of the posterior mean at t=1, clamped to the box.

    x_1 = eps carries no information, so E(x|x_1) averaged over eps is the
    model's global barycenter of fitness mass — the natural starting point.
    """
    interp = interp or linear_interpolant()
    dim = model.spec.dim if hasattr(model, "spec") else model.dim
    eps = antithetic_noise(monte_size, dim, rng)
    m = posterior_mean(model.velocity(eps, 1.0), eps, 1.0, interp)
    avg = m.mean(axis=0)
    if not np.all(np.isfinite(avg)):
        raise RuntimeError("non-finite initialization average")
    return np.clip(avg, -1.0, 1.0)


def ascend_at_scale(x: np.ndarray, source, t: float, config: GradConfig,
                    rng: np.random.Generator,
                    interp: Optional[Interpolant] = None):
    """Clamped gradient ascent at fixed t until the applied step stalls.

    Stops when the infinity-norm of the applied (post-clamp) step drops below
    config.tol for 3 consecutive steps, or at max_steps.  Returns the final
    point and a trace of (step, grad_norm, step_norm) dicts; grad_norm is the
    Euclidean norm of the raw gradient, step_norm the infinity-norm of the
    movement actually made.
    """
    x = np.array(x, dtype=float)
    rows = []
    quiet = 0
    for k in range(1, config.max_steps + 1):
        g = stable_mc_gradient(source, x, t, config.monte_size, rng, interp=interp)
        x_new = np.clip(x + config.lr * g, -1.0, 1.0)
        step_norm = float(np.max(np.abs(x_new - x)))
        rows.append({"step": k, "grad_norm": float(np.linalg.norm(g)),
                     "step_norm": step_norm})
        x = x_new
        quiet = quiet + 1 if step_norm < config.tol else 0
        if quiet >= 3:
            break
    return x, rows


# ---------------------------------------------------------------------------
# quadrature oracles (1-D)


class QuadratureScoreSource:
    """Deterministic 1-D score oracle from composite-Simpson integration.

    p_t(y) = integral over the box of N(y; alpha_t xbar, sigma_t^2) q(xbar),
    with q the exponentially transformed fitness on a fixed node grid.  All
    sums run in log space, so tiny sigma_t and far-out y stay stable.
    """

    def __init__(self, problem: Problem, n_nodes: int = 2**14 + 1,
                 temp: Optional[float] = None, c_pstd: float = C_PSTD_DEFAULT,
                 interp: Optional[Interpolant] = None):
        if problem.dim != 1:
            raise ValueError("quadrature oracle is 1-D only")
        if n_nodes % 2 == 0:
            n_nodes += 1  # Simpson needs an odd node count
        from .sampling import calibrate_temp, transform_fitness

        self.interp = interp or linear_interpolant()
        self.nodes = np.linspace(-1.0, 1.0, n_nodes)
        raw, feas = raw_fitness(problem, self.nodes[:, None])
        if temp is None:
            temp, _ = calibrate_temp(raw, feas, c_pstd)
        self.temp = float(temp)
        q = transform_fitness(np.where(feas, raw, -np.inf), self.temp)
        q[~feas] = 0.0
        h = self.nodes[1] - self.nodes[0]
        simpson = np.ones(n_nodes)
        simpson[1:-1:2] = 4.0
        simpson[2:-1:2] = 2.0
        mass = q * simpson * (h / 3.0)
        with np.errstate(divide="ignore"):
            self.log_mass = np.log(mass)  # -inf at zero-fitness nodes

    def _log_terms(self, y: np.ndarray, t: float) -> np.ndarray:
        a, s = self.interp.alpha(t), self.interp.sigma(t)
        dev = y[:, None] - a * self.nodes[None, :]
        return self.log_mass[None, :] - 0.5 * dev * dev / (s * s) \
            - 0.5 * np.log(2 * np.pi * s * s)

    def log_density(self, y, t: float) -> np.ndarray:
        """log p_t(y), up to the fitness normalization constant."""
        y1 = np.atleast_1d(np.asarray(y, dtype=float)).reshape(-1)
        return logsumexp(self._log_terms(y1, t), axis=1)

    def score(self, x_t, t: float) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x_t, dtype=float))
        y = x2.reshape(-1)
        a, s = self.interp.alpha(t), self.interp.sigma(t)
        lt = self._log_terms(y, t)
        resp = np.exp(lt - logsumexp(lt, axis=1, keepdims=True))
        sc = np.sum(resp * (a * self.nodes[None, :] - y[:, None]), axis=1) / (s * s)
        out = sc.reshape(x2.shape)
        return out[0] if np.asarray(x_t).ndim == 1 else out


def quadrature_log_objective(problem: Problem, x: float, t: float,
                             source: Optional[QuadratureScoreSource] = None,
                             gh_nodes: int = 64) -> float:
    """log P(x,t) = E_eps[log p_t(alpha x + sigma eps)] up to a constant.

    The eps-expectation uses Gauss-Hermite quadrature; pass a prebuilt
    `source` to share one fitness grid across many calls.
    """
    source = source or QuadratureScoreSource(problem)
    interp = source.interp
    u, w = hermgauss(gh_nodes)
    eps = np.sqrt(2.0) * u
    y = interp.alpha(t) * float(x) + interp.sigma(t) * eps
    return float(np.dot(w / np.sqrt(np.pi), source.log_density(y, t)))


# ---------------------------------------------------------------------------
# parallel exploration


def parallel_explore_step(state: OptState, fitness: Callable, t_i: float,
                          t_next: float, config: ExploreConfig,
                          rng: np.random.Generator, total_scales: int,
                          interp: Optional[Interpolant] = None) -> list:
    """Merge near-duplicates, prune to keep_size, spawn local explorers.

    Solutions closer than kappa*sigma/alpha (max-norm) at t_i collapse to the
    one with higher raw fitness; survivors are the top keep_size by raw
    fitness; each survivor then spawns explore_time draws from
    N(x*, (sqrt(2) sigma/alpha)^2 I) clamped to the box, used at t_next.
    The best solution always survives.
    """
    interp = interp or linear_interpolant()
    sols = [np.asarray(x, dtype=float) for x in state.solutions]
    vals = fitness(np.stack(sols))
    vals = np.where(np.isnan(vals), -np.inf, vals)
    a, s = interp.alpha(t_i), interp.sigma(t_i)
    radius = config.kappa * s / a if a > 0 else np.inf
    order = np.argsort(-vals, kind="stable")
    survivors = []
    for idx in order:
        if all(np.max(np.abs(sols[idx] - sols[j])) >= radius for j in survivors):
            survivors.append(idx)
    i = state.scale_index
    survivors = survivors[:config.keep_at(i, total_scales)]
    out = [sols[j] for j in survivors]
    n_spawn = config.explore_at(i, total_scales)
    sd = np.sqrt(2.0) * s / a if a > 0 else np.inf
    for j in survivors:
        draws = sols[j] + sd * rng.standard_normal((n_spawn, sols[j].shape[0]))
        out.extend(np.clip(d, -1.0, 1.0) for d in draws)
    return out


# ---------------------------------------------------------------------------
# Gaussian-homotopy baseline


def gaussian_homotopy_gradient(objective: Callable, x: np.ndarray, sigma: float,
                               sample_count: int,
                               rng: np.random.Generator):
    """Smoothed-objective gradient E[f(x + sigma u) u]/sigma, antithetic pairs.

    Returns (estimate, per-component variance of the estimate).  The variance
    output feeds the dimensionality diagnostic: at fixed sample_count the
    relative error of this estimator grows with dimension, unlike the
    score-based gradient.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if sample_count < 2 or sample_count % 2 != 0:
        raise ValueError("sample_count must be even and >= 2")
    x = np.asarray(x, dtype=float)
    half = sample_count // 2
    u = rng.standard_normal((half, x.shape[-1]))
    f_plus = np.asarray(objective(x + sigma * u), dtype=float)
    f_minus = np.asarray(objective(x - sigma * u), dtype=float)
    pair_terms = (f_plus - f_minus)[:, None] * u / (2.0 * sigma)
    est = pair_terms.mean(axis=0)
    var = pair_terms.var(axis=0, ddof=1) / half if half > 1 else np.zeros_like(est)
    return est, var


# ---------------------------------------------------------------------------
# full run


@dataclass(frozen=True)
class RunResult:
    """Final solutions sorted by raw fitness (best first)."""

    solutions: np.ndarray  # native coordinates, (k, n)
    fitness: np.ndarray  # maximization-oriented raw fitness
    solutions_box: np.ndarray  # same points in [-1,1]^n
    state: OptState

    @property
    def best(self) -> np.ndarray:
        return self.solutions[0]


def _train_plan(train, count: int) -> list:
    plan = list(train) if isinstance(train, (list, tuple)) else [train]
    while len(plan) < count:
        plan.append(plan[-1])
    return plan[:count]


def run_optimization(problem: Problem, tseq: TSequence,
                     rng: np.random.Generator, *,
                     grad: GradConfig = GradConfig(),
                     explore: Optional[ExploreConfig] = None,
                     train: Union[TrainConfig, Sequence[TrainConfig]] = TrainConfig(),
                     pool_size: int = 2**16,
                     pn: int = 3,
                     local_prior: bool = True,
                     c_pstd: float = C_PSTD_DEFAULT,
                     trace_sink: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Anneal over tseq: pool -> train -> ascend (-> explore) per scale.

    Pools use the uniform prior for the first `pn` scales (and always when
    `local_prior` is off); afterwards each solution centers a Gaussian prior
    whose width sqrt(2)*sigma/alpha is taken at the lagged scale index
    max(i-pn, 0) — lagging keeps the sampled region a few scales wider than
    the current one.  Widths above 2 fall back to uniform (the box has
    half-width 1, so nothing is local yet).  `train` may be a single config
    or a per-scale list; entry 0 trains from scratch, later entries finetune
    the previous scale's weights when their warm_start flag is set.

    Aborts (empty feasible set, divergent training, non-finite gradients)
    raise OptimizationAborted carrying the scale index and the trace so far.
    `trace_sink`, when given, receives each trace row as it is produced, so
    callers can stream the trace to disk and keep it parseable mid-run.
    """
    state = OptState(solutions=[], scale_index=0, trace=[], rng=rng)

    def emit(row: dict) -> None:
        state.trace.append(row)
        if trace_sink is not None:
            trace_sink(row)
    plan = _train_plan(train, tseq.count + 1)
    interp = linear_interpolant()

    def fitness_fn(pts):
        return raw_fitness(problem, pts)[0]

    model = None
    for i, t in enumerate(tseq.values):
        state.scale_index = i
        t = float(t)
        try:
            j = max(i - pn, 0)
            priors = None
            if local_prior and i >= pn and state.solutions:
                t_j = float(tseq.values[j])
                a_j, s_j = interp.alpha(t_j), interp.sigma(t_j)
                sd = np.sqrt(2.0) * s_j / a_j if a_j > 0 else np.inf
                if np.isfinite(sd) and sd <= 2.0:
                    priors = [LocalPrior.around(x, sd) for x in state.solutions]
            pool = build_training_pool(problem, pool_size, rng,
                                       priors=priors, c_pstd=c_pstd)
            best_raw = float(np.nanmax(pool.raw)) if pool.feasible.any() else np.nan
            emit({"scale": i, "t": t, "phase": "pool", "step": 0,
                  "solution": -1, "fitness": best_raw,
                  "grad_norm": np.nan, "step_norm": np.nan})

            cfg = plan[i]
            init = model if (i > 0 and cfg.warm_start) else None
            model = train_flow_matching(pool, t, cfg, rng, init=init)
            emit({"scale": i, "t": t, "phase": "train",
                  "step": cfg.steps, "solution": -1,
                  "fitness": np.nan, "grad_norm": np.nan,
                  "step_norm": np.nan})

            if i == 0:
                x0 = initialize_first_scale(model, grad.monte_size, rng, interp)
                state.solutions = [x0]
                f0 = float(np.nan_to_num(fitness_fn(x0[None])[0], nan=-np.inf))
                emit({"scale": i, "t": t, "phase": "ascend",
                      "step": 0, "solution": 0, "fitness": f0,
                      "grad_norm": np.nan, "step_norm": np.nan})
            else:
                streams = rng.spawn(len(state.solutions))
                moved = []
                for sid, (x, sub) in enumerate(zip(state.solutions, streams)):
                    x_new, rows = ascend_at_scale(x, model, t, grad, sub, interp)
                    fx = float(np.nan_to_num(fitness_fn(x_new[None])[0], nan=-np.inf))
                    for r in rows:
                        emit({"scale": i, "t": t, "phase": "ascend",
                              "step": r["step"], "solution": sid,
                              "fitness": fx if r is rows[-1] else np.nan,
                              "grad_norm": r["grad_norm"],
                              "step_norm": r["step_norm"]})
                    moved.append(x_new)
                state.solutions = moved
                if explore is not None:
                    t_next = float(tseq.values[i + 1]) if i < tseq.count else t
                    state.solutions = parallel_explore_step(
                        state, fitness_fn, t, t_next, explore, rng, tseq.count,
                        interp)
                    vals = fitness_fn(np.stack(state.solutions))
                    for sid, fx in enumerate(vals):
                        emit({"scale": i, "t": t, "phase": "explore",
                              "step": 0, "solution": sid,
                              "fitness": float(np.nan_to_num(fx, nan=-np.inf)),
                              "grad_norm": np.nan,
                              "step_norm": np.nan})
            state.history.append((i, np.stack(state.solutions)))
        except OptimizationAborted:
            raise
        except Exception as exc:
            raise OptimizationAborted(str(exc), i, state.trace) from exc

    box = np.stack(state.solutions)
    vals = fitness_fn(box)
    order = np.argsort(-np.where(np.isnan(vals), -np.inf, vals), kind="stable")
    box = box[order]
    return RunResult(solutions=problem.denormalize(box),
                     fitness=vals[order],
                     solutions_box=box,
                     state=state)
