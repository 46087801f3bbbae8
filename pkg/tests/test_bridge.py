import numpy as np
import pytest
from scipy import stats

from hitting_filter.bridge import (
    BridgeParams,
    bridge_min_cdf,
    gbm_no_cross_factor,
    interval_survival_product,
    no_cross_factor,
    sample_interval_min,
)
from hitting_filter.exceptions import InvalidParameterError, ShapeError


@pytest.fixture(scope="session")
def bridge():
    return BridgeParams(x_left=1.0, x_right=1.2, var=0.5)


def test_bridge_min_cdf_example():
    assert bridge_min_cdf(BridgeParams(0.0, 0.0, 1.0), -np.sqrt(0.5)) == pytest.approx(np.exp(-1.0), rel=1e-14)


@pytest.mark.parametrize("u", [1.0, 1.1, 5.0])
def test_bridge_min_cdf_above_lowest_endpoint(bridge, u):
    assert bridge_min_cdf(bridge, u) == 1.0


def test_bridge_min_cdf_is_monotone(bridge):
    values = bridge_min_cdf(bridge, np.linspace(-3.0, 1.0, 200))
    assert np.all(np.diff(values) >= 0)
    assert values[0] < 1e-10


@pytest.mark.parametrize("a", [0.0, 0.5, 0.9, 0.999])
def test_no_cross_is_complement_of_min_cdf(bridge, a):
    assert no_cross_factor(bridge, a) == pytest.approx(1.0 - bridge_min_cdf(bridge, a), abs=1e-15)


@pytest.mark.parametrize(
    "x_left, x_right, a",
    [
        (1.0, 1.2, 1.0),
        (1.0, 1.2, 1.2),
        (1.0, 0.5, 0.6),
        (0.5, 1.0, 0.6),
    ],
)
def test_no_cross_vanishes_when_an_endpoint_touches(x_left, x_right, a):
    assert no_cross_factor(BridgeParams(x_left, x_right, 0.1), a) == 0.0


def test_no_cross_is_symmetric():
    forward = no_cross_factor(BridgeParams(1.0, 1.5, 0.3), 0.7)
    backward = no_cross_factor(BridgeParams(1.5, 1.0, 0.3), 0.7)
    assert forward == pytest.approx(backward, abs=1e-15)


def test_no_cross_limits():
    assert no_cross_factor(BridgeParams(1.0, 1.2, 1e-12), 0.5) == 1.0
    assert no_cross_factor(BridgeParams(1.0, 1.2, 1e12), 0.5) < 1e-11


def test_bridge_params_rejects_non_positive_variance():
    with pytest.raises(InvalidParameterError):
        BridgeParams(1.0, 1.0, 0.0)
    with pytest.raises(InvalidParameterError):
        BridgeParams(np.ones(2), np.ones(2), np.array([0.1, -0.1]))


def test_no_cross_vectorised(bridge):
    p = BridgeParams(np.array([1.0, 1.0, 0.4]), np.array([1.2, 0.45, 1.0]), np.array([0.5, 0.5, 0.5]))
    values = no_cross_factor(p, 0.5)
    assert values.shape == (3,)
    assert values[0] == pytest.approx(no_cross_factor(bridge, 0.5))
    assert values[2] == 0.0


def test_no_cross_matches_discretised_bridges(bridge):
    """Test the closed form against finely discretised Brownian bridges."""
    rng = np.random.default_rng(21)
    paths, steps, horizon = 10_000, 2000, 1.0
    dt = horizon / steps
    sigma = np.sqrt(bridge.var / horizon)
    x = np.full(paths, bridge.x_left)
    running_min = x.copy()
    for k in range(steps - 1):
        remaining = horizon - k * dt
        mean = x + (bridge.x_right - x) * dt / remaining
        std = sigma * np.sqrt(dt * (remaining - dt) / remaining)
        x = mean + std * rng.standard_normal(paths)
        np.minimum(running_min, x, out=running_min)
    survived = np.mean(running_min > 0.5)
    assert survived == pytest.approx(no_cross_factor(bridge, 0.5), abs=0.03)


def test_sampled_minima_follow_min_cdf(bridge):
    u = np.random.default_rng(17).uniform(size=5000)
    minima = sample_interval_min(bridge, u)
    assert np.all(minima <= 1.0)
    result = stats.kstest(minima, lambda v: bridge_min_cdf(bridge, v))
    assert result.pvalue > 0.001


def test_sampled_minima_give_no_cross_frequency(bridge):
    u = np.random.default_rng(9).uniform(size=100_000)
    frequency = np.mean(sample_interval_min(bridge, u) > 0.5)
    expected = no_cross_factor(bridge, 0.5)
    assert abs(frequency - expected) < 3 * np.sqrt(expected * (1 - expected) / u.size)


def _random_bridges(count: int, seed: int) -> list[tuple[BridgeParams, float]]:
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        x_left, x_right = rng.uniform(0.5, 1.5, size=2)
        var = rng.uniform(0.05, 1.0)
        a = min(x_left, x_right) - rng.uniform(0.05, 0.5) * np.sqrt(var)
        cases.append((BridgeParams(x_left, x_right, var), a))
    return cases


@pytest.mark.parametrize("p, a", _random_bridges(10, 31))
def test_no_cross_matches_sampled_minima_on_random_bridges(p, a):
    """Test the no-crossing factor against minima of 10⁵ pinned bridges drawn by inverse transform."""
    u = np.random.default_rng(33).uniform(size=100_000)
    minima = sample_interval_min(p, u)
    assert stats.kstest(minima, lambda v: bridge_min_cdf(p, v)).pvalue > 0.001
    frequency = np.mean(minima > a)
    expected = no_cross_factor(p, a)
    assert abs(frequency - expected) < 3.5 * np.sqrt(expected * (1 - expected) / u.size)


def test_sample_interval_min_inverts_min_cdf(bridge):
    levels = np.linspace(-1.0, 0.99, 25)
    np.testing.assert_allclose(sample_interval_min(bridge, bridge_min_cdf(bridge, levels)), levels, atol=1e-9)


def test_sample_interval_min_example():
    p = BridgeParams(0.0, 0.0, 1.0)
    assert sample_interval_min(p, np.exp(-1.0)) == pytest.approx(-np.sqrt(0.5), rel=1e-12)
    assert sample_interval_min(p, 1.0 - 1e-15) == pytest.approx(0.0, abs=1e-7)


@pytest.mark.parametrize("u", [0.0, 1.0, -0.5, 2.0])
def test_sample_interval_min_rejects_draws_outside_unit_interval(bridge, u):
    with pytest.raises(InvalidParameterError):
        sample_interval_min(bridge, u)


def test_interval_survival_product():
    path = np.array([1.0, 1.2, 0.9, 1.1])
    vols = np.array([0.5, 0.4, 0.6])
    dts = np.full(3, 0.1)
    expected = np.prod(
        [no_cross_factor(BridgeParams(path[j], path[j + 1], dts[j] * vols[j] ** 2), 0.7) for j in range(3)]
    )
    assert interval_survival_product(path, vols, dts, 0.7) == pytest.approx(expected, rel=1e-14)
    assert interval_survival_product(np.array([1.0, 0.6, 1.0]), vols[:2], dts[:2], 0.7) == 0.0


def test_interval_survival_product_batch():
    paths = np.array([[1.0, 1.2], [1.0, 0.5]])
    values = interval_survival_product(paths, np.full((2, 1), 0.5), np.full((2, 1), 0.1), 0.7)
    assert values.shape == (2,)
    assert values[1] == 0.0


def test_interval_survival_product_empty():
    assert interval_survival_product(np.array([1.0]), np.array([]), np.array([]), 0.5) == 1.0


def test_interval_survival_product_shape_mismatch():
    with pytest.raises(ShapeError):
        interval_survival_product(np.array([1.0, 1.1, 1.2]), np.array([0.1]), np.array([0.1, 0.1]), 0.5)


def test_gbm_no_cross_factor():
    value = gbm_no_cross_factor(86.3, 80.0, 0.3, 0.1, 76.0)
    expected = no_cross_factor(BridgeParams(np.log(86.3), np.log(80.0), 0.09 * 0.1), np.log(76.0))
    assert value == pytest.approx(expected, rel=1e-14)
    assert gbm_no_cross_factor(86.3, 70.0, 0.3, 0.1, 76.0) == 0.0
    assert gbm_no_cross_factor(np.array([1.0, 2.0]), 1.5, 0.3, 0.1, 0.0).tolist() == [1.0, 1.0]
