from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from hitting_filter.exceptions import InvalidParameterError, ShapeError
from hitting_filter.filtering import Kernel, KernelNormalization, step_barrier_factor, step_log_kernel
from hitting_filter.models import DiffusionModel, TimeGrid, exact_gbm_step, simulate_signal_paths
from hitting_filter.survival import continuation_survival, gbm_survival_closed_form
from hitting_filter.utils import parallel_map, timed, with_module_context

logger = logging.getLogger(__name__)

MIN_EFFECTIVE_SAMPLE_SIZE = 10.0


@dataclass(frozen=True)
class ParticleCloud:
    paths: np.ndarray
    log_weights: np.ndarray
    barrier_products: np.ndarray

    @property
    def normalized_weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.normalized_weights**2))


@dataclass(frozen=True)
class OracleEstimate:
    horizons: np.ndarray
    probabilities: np.ndarray
    std_errors: np.ndarray
    ess: float
    warning: str | None = None


def weighted_estimate(values: np.ndarray, log_weights: np.ndarray) -> tuple[float, float]:
    """Self-normalized mean and its delta-method standard error."""
    weights = np.exp(log_weights - logsumexp(log_weights))
    estimate = float(np.sum(weights * values))
    return estimate, float(math.sqrt(np.sum(weights**2 * (values - estimate) ** 2)))


def bootstrap_half_width(
    values: np.ndarray, log_weights: np.ndarray, rng: np.random.Generator, resamples: int = 200
) -> float:
    """Half-width of the percentile bootstrap 95% interval of the self-normalized mean.

    :param np.ndarray values: per-particle K F̄
    :param np.ndarray log_weights: per-particle log L
    :param np.random.Generator rng:
    :param int resamples: B
    :return float:
    """
    values, log_weights = np.asarray(values, dtype=float), np.asarray(log_weights, dtype=float)
    if values.shape != log_weights.shape:
        raise ShapeError(f"{values.shape=} differs from {log_weights.shape=}")
    estimates = np.empty(resamples)
    for b in range(resamples):
        index = rng.integers(0, values.size, values.size)
        estimates[b] = weighted_estimate(values[index], log_weights[index])[0]
    low, high = np.percentile(estimates, [2.5, 97.5])
    return float(0.5 * (high - low))


def simulate_particles(
    model: DiffusionModel,
    obs: np.ndarray,
    grid: TimeGrid,
    barrier: float,
    normals: np.ndarray,
    kernel: Kernel = Kernel.GAUSSIAN,
    normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO,
) -> ParticleCloud:
    """Prior signal paths on t_0..t_m, weighted by the observation kernels and the barrier products.

    Euler paths go with the Gaussian kernel and exact Black-Scholes paths with the lognormal one.
    """
    times = grid.times[: grid.m + 1]
    if kernel is Kernel.LOGNORMAL:
        mu, sigma = model.params["mu"], model.params["sigma"]
        paths = np.empty((normals.shape[0], times.size))
        paths[:, 0] = model.x0
        for k in range(times.size - 1):
            paths[:, k + 1] = exact_gbm_step(paths[:, k], mu, sigma, times[k + 1] - times[k], normals[:, k])
    else:
        paths = simulate_signal_paths(model, model.x0, times, normals)

    log_weights = np.zeros(paths.shape[0])
    barrier_products = np.ones(paths.shape[0])
    for k in range(times.size - 1):
        dt = times[k + 1] - times[k]
        x_prev, x_next = paths[:, k], paths[:, k + 1]
        log_weights += step_log_kernel(model, kernel, x_prev, obs[k], x_next, obs[k + 1], times[k], dt, normalization)
        barrier_products *= step_barrier_factor(model, kernel, x_prev, x_next, times[k], dt, barrier)
    return ParticleCloud(paths, log_weights, barrier_products)


@with_module_context("oracle")
@timed
def particle_conditional_survival(
    model: DiffusionModel,
    obs,
    grid: TimeGrid,
    barrier: float,
    horizons,
    particles: int,
    rng: np.random.Generator,
    *,
    inner: int = 1,
    steps: int = 50,
    kernel: Kernel = Kernel.GAUSSIAN,
    normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO,
    force_mc_fbar: bool = False,
    workers: int | None = None,
) -> OracleEstimate:
    """Brute-force estimate of P(τ_a > t_n | y_0..y_m) for every horizon.

    F̄ at the particle's value at t_m is the Black-Scholes closed form for the gbm preset, otherwise the mean over
    `inner` Euler continuations with bridge products. Continuations share their normals across horizons.

    :param DiffusionModel model:
    :param obs: y_0..y_m
    :param TimeGrid grid: observation grid on [0, t_m]
    :param float barrier: a
    :param horizons: t_n >= t_m
    :param int particles: P
    :param np.random.Generator rng:
    :param int inner: continuation paths per particle
    :param int steps: Euler steps on [t_m, t_n]
    :param Kernel kernel:
    :param KernelNormalization normalization:
    :param bool force_mc_fbar:
    :param int | None workers: threads over particle chunks
    :return OracleEstimate:
    """
    obs = np.asarray(obs, dtype=float)
    horizons = np.atleast_1d(np.asarray(horizons, dtype=float))
    if particles < 1 or inner < 1 or steps < 1:
        raise InvalidParameterError(f"Need particles, inner and steps >= 1, got {particles=}, {inner=}, {steps=}")
    if obs.shape != (grid.m + 1,):
        raise ShapeError(f"Expected {grid.m + 1} observations, got shape {obs.shape}")
    if np.any(horizons < grid.s):
        raise InvalidParameterError(f"Horizons must not precede t_m={grid.s}")

    normals = rng.standard_normal((particles, grid.m))
    chunks = np.array_split(np.arange(particles), max(1, workers or 1))
    clouds = parallel_map(
        lambda index: simulate_particles(model, obs, grid, barrier, normals[index], kernel, normalization),
        chunks,
        workers,
    )
    cloud = ParticleCloud(
        np.vstack([c.paths for c in clouds]),
        np.concatenate([c.log_weights for c in clouds]),
        np.concatenate([c.barrier_products for c in clouds]),
    )
    terminal = cloud.paths[:, -1]

    closed_form = model.family == "gbm" and not force_mc_fbar
    if not closed_form:
        continuation_normals = rng.standard_normal((steps, particles * inner))
        starts = np.repeat(terminal, inner)

    probabilities, std_errors = [], []
    for t_n in horizons:
        if t_n == grid.s:
            fbar = np.ones(particles)
        elif closed_form:
            fbar = gbm_survival_closed_form(terminal, model.params["mu"], model.params["sigma"], barrier, t_n - grid.s)
        else:
            survival = continuation_survival(model, starts, grid.s, t_n, continuation_normals, barrier)
            fbar = survival.reshape(particles, inner).mean(axis=1)
        estimate, std_err = weighted_estimate(cloud.barrier_products * fbar, cloud.log_weights)
        probabilities.append(min(max(estimate, 0.0), 1.0))
        std_errors.append(std_err)

    ess = cloud.effective_sample_size
    warning = None
    if ess < MIN_EFFECTIVE_SAMPLE_SIZE:
        warning = f"Degenerate particle weights: effective sample size {ess:.1f} out of {particles}"
        logger.warning(warning)
    logger.info(f"Oracle with P={particles}: effective sample size {ess:.0f}")
    return OracleEstimate(horizons, np.asarray(probabilities), np.asarray(std_errors), ess, warning)
