import math

import numpy as np
import pytest

from hitting_filter.exceptions import InvalidParameterError, ShapeError
from hitting_filter.filtering import Kernel
from hitting_filter.models import Scheme, TimeGrid, gbm_model, ou_model, simulate_pair
from hitting_filter.oracle import (
    ParticleCloud,
    bootstrap_half_width,
    particle_conditional_survival,
    simulate_particles,
    weighted_estimate,
)
from hitting_filter.survival import Budgets, fbar_mc, survival_curve


@pytest.fixture(scope="session")
def ou():
    return ou_model(lam=0.18, theta=0.35, sigma=0.12, delta=0.16, x0=0.35, y0=0.35)


@pytest.fixture(scope="session")
def grid():
    return TimeGrid.uniform(1.0, 10)


@pytest.fixture(scope="session")
def ou_obs(ou, grid):
    return simulate_pair(ou, grid, np.random.default_rng(31), Scheme.EXACT).obs


def test_weighted_estimate_with_equal_weights():
    values = np.array([0.0, 1.0, 1.0, 0.0])
    estimate, std_err = weighted_estimate(values, np.zeros(4))
    assert estimate == pytest.approx(0.5)
    assert std_err == pytest.approx(math.sqrt(4 * 0.25 / 16))


def test_weighted_estimate_is_shift_invariant():
    rng = np.random.default_rng(0)
    values, log_weights = rng.uniform(size=50), rng.normal(size=50)
    first = weighted_estimate(values, log_weights)
    second = weighted_estimate(values, log_weights + 700.0)
    assert first == pytest.approx(second, rel=1e-12)


def test_particle_cloud_effective_sample_size():
    assert ParticleCloud(np.zeros((4, 2)), np.zeros(4), np.ones(4)).effective_sample_size == pytest.approx(4.0)
    degenerate = ParticleCloud(np.zeros((3, 2)), np.array([0.0, -1000.0, -1000.0]), np.ones(3))
    assert degenerate.effective_sample_size == pytest.approx(1.0)


def test_bootstrap_half_width_shrinks_with_particles():
    rng = np.random.default_rng(5)
    widths = []
    for size in (20_000, 40_000):
        values = (rng.uniform(size=size) < 0.3).astype(float)
        widths.append(bootstrap_half_width(values, rng.normal(0.0, 0.5, size), rng, resamples=400))
    assert widths[1] / widths[0] == pytest.approx(1 / math.sqrt(2), rel=0.2)


def test_bootstrap_shape_mismatch():
    with pytest.raises(ShapeError):
        bootstrap_half_width(np.ones(3), np.zeros(2), np.random.default_rng(0))


def test_particles_without_barrier(ou, grid, ou_obs):
    normals = np.random.default_rng(1).standard_normal((500, grid.m))
    cloud = simulate_particles(ou, ou_obs, grid, -1e9, normals)
    assert cloud.paths.shape == (500, grid.m + 1)
    np.testing.assert_array_equal(cloud.barrier_products, 1.0)
    assert cloud.normalized_weights.sum() == pytest.approx(1.0)


def test_oracle_without_barrier_at_observation_horizon(ou, grid, ou_obs):
    estimate = particle_conditional_survival(ou, ou_obs, grid, -1e9, [1.0], 2000, np.random.default_rng(2))
    assert estimate.probabilities[0] == pytest.approx(1.0, abs=1e-12)
    assert estimate.warning is None


def test_oracle_with_uninformative_observations():
    """Test that huge observation noise gives back the unconditional survival probability."""
    model = ou_model(lam=0.18, theta=0.35, sigma=0.12, delta=1e3, x0=0.35, y0=0.35)
    grid = TimeGrid.uniform(1.0, 10)
    obs = np.full(grid.m + 1, 0.35)
    estimate = particle_conditional_survival(
        model, obs, grid, 0.2, [3.0], 50_000, np.random.default_rng(3), steps=20
    )
    assert estimate.ess > 0.99 * 50_000
    unconditional = fbar_mc(model, 0.35, 0.0, 3.0, 30, 50_000, 0.2, np.random.default_rng(4))
    tolerance = 3 * math.hypot(estimate.std_errors[0], unconditional.std_err) + 0.01
    assert abs(estimate.probabilities[0] - unconditional.value) < tolerance


def test_oracle_warns_on_degenerate_weights(caplog):
    model = ou_model(lam=0.18, theta=0.35, sigma=0.12, delta=1e-3, x0=0.35, y0=0.35)
    grid = TimeGrid.uniform(1.0, 10)
    obs = 0.35 + 0.2 * np.sin(np.arange(grid.m + 1))
    estimate = particle_conditional_survival(model, obs, grid, 0.2, [2.0], 200, np.random.default_rng(5))
    assert estimate.ess < 10
    assert "effective sample size" in estimate.warning
    assert "Degenerate particle weights" in caplog.text


def test_oracle_is_independent_of_workers(ou, grid, ou_obs):
    kwargs = {"steps": 10}
    single = particle_conditional_survival(ou, ou_obs, grid, 0.2, [2.0, 4.0], 3000, np.random.default_rng(6), **kwargs)
    threaded = particle_conditional_survival(
        ou, ou_obs, grid, 0.2, [2.0, 4.0], 3000, np.random.default_rng(6), workers=3, **kwargs
    )
    np.testing.assert_array_equal(single.probabilities, threaded.probabilities)


def test_oracle_inner_continuations(ou, grid, ou_obs):
    estimate = particle_conditional_survival(
        ou, ou_obs, grid, 0.2, [2.0, 4.0], 2000, np.random.default_rng(7), inner=4, steps=10
    )
    assert np.all((estimate.probabilities >= 0) & (estimate.probabilities <= 1))
    assert estimate.probabilities[0] >= estimate.probabilities[1] - 3 * estimate.std_errors.max()


def test_oracle_invalid_arguments(ou, grid, ou_obs):
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidParameterError):
        particle_conditional_survival(ou, ou_obs, grid, 0.2, [0.5], 100, rng)
    with pytest.raises(InvalidParameterError):
        particle_conditional_survival(ou, ou_obs, grid, 0.2, [2.0], 0, rng)
    with pytest.raises(ShapeError):
        particle_conditional_survival(ou, ou_obs[:-1], grid, 0.2, [2.0], 100, rng)


@pytest.mark.slow
def test_filter_agrees_with_oracle_for_black_scholes():
    model = gbm_model(mu=0.03, sigma=0.03, delta=0.1, x0=86.3, y0=86.3)
    grid = TimeGrid.uniform(1.0, 10)
    obs = simulate_pair(model, grid, np.random.default_rng(41), Scheme.EXACT).obs
    horizons = [2.0, 5.0, 10.0]
    curve = survival_curve(model, obs, grid, 76.0, horizons, Budgets(1_000, 50, 1000), Kernel.LOGNORMAL)
    oracle = particle_conditional_survival(
        model, obs, grid, 76.0, horizons, 200_000, np.random.default_rng(42), kernel=Kernel.LOGNORMAL
    )
    np.testing.assert_allclose(curve.probabilities, oracle.probabilities, atol=0.05)


@pytest.mark.slow
def test_filter_agrees_with_oracle_for_mean_reversion(ou):
    grid = TimeGrid.uniform(1.0, 10)
    obs = simulate_pair(ou, grid, np.random.default_rng(43), Scheme.EXACT).obs
    horizons = [2.0, 4.0, 6.0]
    curve = survival_curve(ou, obs, grid, 0.2, horizons, Budgets(1_000, 50, 2000), rng=np.random.default_rng(44))
    oracle = particle_conditional_survival(ou, obs, grid, 0.2, horizons, 200_000, np.random.default_rng(45))
    np.testing.assert_allclose(curve.probabilities, oracle.probabilities, atol=0.05)
