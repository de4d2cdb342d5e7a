"""Fitness transform, temperature calibration, resampling, priors, noise."""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chisquare

from scoreopt import sampling as sp
from scoreopt.problems import Problem, make_problem


# ---------------------------------------------------------------------------
# fitness transform


def test_transform_reference_point_gets_weight_one():
    raw = np.arange(1.0, 101.0)
    w = sp.transform_fitness(raw, temp=2.0)
    # nearest-rank TP99 of 1..100 is 99
    assert w[98] == pytest.approx(1.0)


def test_transform_constant_pool_all_ones():
    w = sp.transform_fitness(np.full(10, 3.3), temp=1.0)
    np.testing.assert_allclose(w, 1.0)


def test_transform_small_pool_exact_values():
    w = sp.transform_fitness(np.array([1.0, 2.0, 3.0]), temp=1.0)
    np.testing.assert_allclose(w, [np.exp(-2), np.exp(-1), 1.0], rtol=1e-12)


def test_transform_zeroes_infeasible():
    raw = np.array([1.0, np.nan, 2.0])
    w = sp.transform_fitness(raw, temp=1.0)
    assert w[1] == 0.0
    assert (w[[0, 2]] > 0).all()


def test_transform_all_infeasible_raises():
    with pytest.raises(sp.EmptyFeasibleError):
        sp.transform_fitness(np.array([np.nan, np.nan]), temp=1.0)


# ---------------------------------------------------------------------------
# temperature calibration


def _statistic(raw, temp):
    w = sp.transform_fitness(raw, temp)
    p = w / w.sum()
    return np.std(p) * len(p)


def test_calibration_example_pool():
    raw = np.array([1.0, 2.0, 3.0])
    assert _statistic(raw, 1.0) == pytest.approx(0.729, abs=2e-3)
    temp, flat = sp.calibrate_temp(raw)
    assert not flat
    assert temp > 1.0
    assert 0.45 <= _statistic(raw, temp) <= 0.55


def test_calibration_flat_pool_flagged():
    temp, flat = sp.calibrate_temp(np.full(8, 2.0))
    assert flat
    assert temp == pytest.approx(np.exp(30.0))
    assert _statistic(np.full(8, 2.0), temp) == 0.0


def test_calibration_self_consistent_on_random_pools():
    rng = np.random.default_rng(0)
    for _ in range(5):
        raw = rng.normal(scale=rng.uniform(0.1, 50), size=512)
        temp, flat = sp.calibrate_temp(raw)
        assert not flat
        assert 0.45 <= _statistic(raw, temp) <= 0.55


def test_calibration_statistic_monotone_in_temp():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=256)
    temps = np.exp(np.linspace(-3, 6, 25))
    stats = [_statistic(raw, t) for t in temps]
    assert all(a >= b - 1e-12 for a, b in zip(stats, stats[1:]))


def test_calibration_ignores_infeasible_entries():
    raw = np.array([np.nan] * 5 + [1.0, 2.0, 3.0])
    temp, flat = sp.calibrate_temp(raw)
    t2, _ = sp.calibrate_temp(np.array([1.0, 2.0, 3.0]))
    assert temp == pytest.approx(t2, rel=1e-9)


# ---------------------------------------------------------------------------
# resampling


def _pool_from_weights(points, weights):
    w = np.asarray(weights, dtype=float)
    return sp.FitnessPool(points=points, raw=w.copy(), feasible=w > 0,
                          temp=1.0, weights=w, probs=w / w.sum(), flat=False)


def test_resample_single_winner():
    pts = np.array([[0.0], [0.5], [-0.5]])
    pool = _pool_from_weights(pts, [0.0, 1.0, 0.0])
    out = sp.fitness_resample(pool, 16, np.random.default_rng(0))
    np.testing.assert_allclose(out, 0.5)


def test_resample_uniform_frequencies():
    k = 8
    pts = np.arange(k, dtype=float)[:, None]
    pool = _pool_from_weights(pts, np.ones(k))
    out = sp.fitness_resample(pool, 100_000, np.random.default_rng(1))
    counts = np.bincount(out[:, 0].astype(int), minlength=k)
    assert chisquare(counts).pvalue > 0.01


def test_resample_one_three_ratio():
    pts = np.array([[0.0], [1.0]])
    pool = _pool_from_weights(pts, [1.0, 3.0])
    out = sp.fitness_resample(pool, 100_000, np.random.default_rng(2))
    frac = np.mean(out[:, 0] == 1.0)
    assert abs(frac - 0.75) < 0.02 * 0.75


def test_resample_matches_target_histogram():
    # weights proportional to f reproduce the f-proportional law (KS < 0.01)
    grid = np.linspace(-1, 1, 4096)[:, None]
    f = 1.5 + grid[:, 0] + 0.5 * np.sin(3 * grid[:, 0])
    pool = _pool_from_weights(grid, f)
    draws = sp.fitness_resample(pool, 100_000, np.random.default_rng(3))[:, 0]
    target_cdf = np.cumsum(f) / f.sum()
    emp_cdf = np.searchsorted(np.sort(draws), grid[:, 0], side="right") / len(draws)
    assert np.max(np.abs(emp_cdf - target_cdf)) < 0.01


def test_resample_zero_mass_raises():
    pool = _pool_from_weights(np.zeros((3, 1)), [1.0, 1.0, 1.0])
    object.__setattr__(pool, "probs", np.zeros(3))
    with pytest.raises(sp.EmptyFeasibleError):
        sp.fitness_resample(pool, 4, np.random.default_rng(0))


def test_resample_deterministic_per_seed():
    pool = _pool_from_weights(np.arange(10.0)[:, None], np.arange(1.0, 11.0))
    a = sp.fitness_resample(pool, 50, np.random.default_rng(7))
    b = sp.fitness_resample(pool, 50, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# priors


def test_uniform_prior_support_and_mean():
    rng = np.random.default_rng(4)
    pts = sp.uniform_prior(20_000, 3, rng)
    assert pts.shape == (20_000, 3)
    assert np.all(np.abs(pts) <= 1.0)
    bound = 3.0 * (1.0 / np.sqrt(3.0)) / np.sqrt(20_000)
    assert np.all(np.abs(pts.mean(axis=0)) < bound)


def test_uniform_prior_seed_repeatable():
    a = sp.uniform_prior(100, 2, np.random.default_rng(5))
    b = sp.uniform_prior(100, 2, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_local_prior_moments():
    prior = sp.LocalPrior.around(np.array([0.1, -0.2]), 0.1)
    pts = sp.local_prior_sample(prior, 100_000, np.random.default_rng(6))
    np.testing.assert_allclose(pts.mean(axis=0), prior.center, atol=3 * 0.1 / np.sqrt(100_000) * 1.5)
    np.testing.assert_allclose(pts.var(axis=0), 0.01, rtol=0.05)


def test_local_prior_tiny_sd_collapses_to_center():
    prior = sp.LocalPrior.around(np.array([0.3]), 1e-300)
    pts = sp.local_prior_sample(prior, 100, np.random.default_rng(7))
    np.testing.assert_array_equal(pts, 0.3)


def test_local_prior_respects_box():
    prior = sp.LocalPrior.around(np.array([0.99, -0.99]), 0.5)
    pts = sp.local_prior_sample(prior, 10_000, np.random.default_rng(8))
    assert np.all(np.abs(pts) <= 1.0)


def test_local_prior_radius_from_quantile():
    prior = sp.LocalPrior.around(np.zeros(1), 0.2)
    assert prior.r == pytest.approx(1.6449 * 0.2, abs=1e-4)


# ---------------------------------------------------------------------------
# debias weights


def test_debias_weight_at_center():
    prior = sp.LocalPrior.around(np.zeros(1), 0.37)
    w = sp.debias_weights(np.zeros(1), prior)
    assert w[0] == pytest.approx(0.9 * np.sqrt(2 * np.pi) / (2 * 1.6449), abs=1e-4)
    assert w[0] == pytest.approx(0.686, abs=1e-3)


def test_debias_weight_at_radius():
    prior = sp.LocalPrior.around(np.zeros(1), 0.5)
    w = sp.debias_weights(np.array([prior.r]), prior)
    assert w[0] == pytest.approx(2.652, abs=2e-3)


def test_debias_weight_tail_is_one():
    prior = sp.LocalPrior.around(np.zeros(2), 0.1)
    w = sp.debias_weights(np.array([[0.5, -0.9]]), prior)
    np.testing.assert_allclose(w, 1.0)


def test_debias_weight_independent_of_sd_inside():
    # w depends only on the standardized deviation inside the band
    for s in (0.05, 0.3, 1.7):
        prior = sp.LocalPrior.around(np.zeros(1), s)
        w = sp.debias_weights(np.array([0.5 * s]), prior)
        assert w[0] == pytest.approx(
            0.9 * np.sqrt(2 * np.pi) * np.exp(0.125) / (2 * 1.6449), abs=1e-4)


def test_debias_reweighted_density_has_unit_mass():
    prior = sp.LocalPrior.around(np.zeros(1), 0.25)

    def integrand(xv):
        pdf = np.exp(-0.5 * (xv / 0.25) ** 2) / (0.25 * np.sqrt(2 * np.pi))
        return sp.debias_weights(np.array([xv]), prior)[0] * pdf

    # integrate piecewise: the weight jumps at +-r
    r = prior.r
    mass = sum(quad(integrand, a, b, limit=200)[0]
               for a, b in [(-10 * 0.25, -r), (-r, r), (r, 10 * 0.25)])
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_debias_batched_shapes():
    prior = sp.LocalPrior.around(np.zeros(3), 0.2)
    w = sp.debias_weights(np.zeros((5, 3)), prior)
    assert w.shape == (5, 3)


# ---------------------------------------------------------------------------
# antithetic noise


def test_antithetic_pairs_cancel_exactly():
    eps = sp.antithetic_noise(64, 4, np.random.default_rng(9))
    np.testing.assert_array_equal(eps[0::2], -eps[1::2])
    assert np.all(eps.sum(axis=0) == 0.0)


def test_antithetic_odd_functional_is_exactly_zero():
    eps = sp.antithetic_noise(32, 2, np.random.default_rng(10))
    assert np.sum(eps**3) == 0.0
    v = np.array([0.3, -1.2])
    assert np.sum(eps @ v) == 0.0


def test_antithetic_covariance_near_identity():
    eps = sp.antithetic_noise(100_000, 2, np.random.default_rng(11))
    cov = eps.T @ eps / len(eps)
    np.testing.assert_allclose(cov, np.eye(2), atol=0.05)


def test_antithetic_odd_size_rejected():
    with pytest.raises(ValueError):
        sp.antithetic_noise(7, 1, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# pool assembly


def test_pool_unconstrained_fully_feasible():
    pool = sp.build_training_pool(make_problem("fractal"), 2048,
                                  np.random.default_rng(12))
    assert pool.feasible_fraction == 1.0
    assert pool.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert pool.loss_weights is None


def test_pool_halfspace_constraint_fraction():
    p = Problem("half", 2, np.array([-1.0, -1.0]), np.array([1.0, 1.0]),
                lambda x: np.sum(x**2, axis=1), sense="minimize",
                constraint=lambda x: x[:, 0] > 0)
    pool = sp.build_training_pool(p, 2**16, np.random.default_rng(13))
    assert abs(pool.feasible_fraction - 0.5) < 0.02
    assert np.all(pool.weights[~pool.feasible] == 0.0)


def test_pool_infeasible_everywhere_raises():
    p = Problem("impossible", 1, np.array([-1.0]), np.array([1.0]),
                lambda x: x[:, 0], sense="minimize",
                constraint=lambda x: x[:, 0] > 2)
    with pytest.raises(sp.EmptyFeasibleError):
        sp.build_training_pool(p, 256, np.random.default_rng(14))


def test_pool_local_prior_carries_loss_weights():
    prior = sp.LocalPrior.around(np.zeros(1), 0.2)
    pool = sp.build_training_pool(make_problem("fractal"), 1024,
                                  np.random.default_rng(15), priors=prior)
    assert pool.loss_weights is not None
    assert pool.loss_weights.shape == pool.points.shape
    # points near the center carry the flattening weight, not 1
    near = np.abs(pool.points[:, 0]) < 0.05
    assert np.all(pool.loss_weights[near, 0] < 1.0)


def test_pool_multiple_priors_split_evenly():
    priors = [sp.LocalPrior.around(np.array([-0.5]), 0.05),
              sp.LocalPrior.around(np.array([0.5]), 0.05)]
    pool = sp.build_training_pool(make_problem("fractal"), 1001,
                                  np.random.default_rng(16), priors=priors)
    assert len(pool.points) == 1001
    assert np.sum(pool.points[:, 0] < 0) == pytest.approx(501, abs=60)
