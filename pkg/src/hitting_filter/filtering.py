from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import narwhals as nw
import numpy as np
from narwhals.exceptions import NarwhalsError
from polars.exceptions import PolarsError

from hitting_filter.bridge import gbm_no_cross_factor, no_cross_values
from hitting_filter.exceptions import FilterDegenerateError, InvalidParameterError, ShapeError
from hitting_filter.models import DiffusionModel, TimeGrid
from hitting_filter.quantization import MarginalQuantization
from hitting_filter.schemas import OBSERVATION_INPUT_SCHEMA
from hitting_filter.utils import timed, with_module_context

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


class Kernel(enum.Enum):
    GAUSSIAN = "gaussian"
    LOGNORMAL = "lognormal"


class KernelNormalization(enum.Enum):
    """Constant in front of the kernel exponent.

    The closed-form kernel is usually written with a 1 / ((2πΔ)^{3/2} σ² δ) prefactor (VERBATIM), yet the ratio
    f_k / P_k of the joint density to the signal density it comes from has the constant 1 / ((2πΔ)^{1/2} δ). The two
    disagree whenever σ depends on the signal level. DENSITY_RATIO, the default, follows f_k / P_k: its constant only
    depends on the observations and cancels in the normalized weights. VERBATIM reproduces the written formula.
    """

    DENSITY_RATIO = "density_ratio"
    VERBATIM = "verbatim"


@dataclass(frozen=True)
class KernelParams:
    dt: float | np.ndarray
    sigma: float | np.ndarray
    drift_signal: float | np.ndarray
    nu: float | np.ndarray
    delta: float | np.ndarray
    drift_obs: float | np.ndarray

    def __post_init__(self):
        for name in ("dt", "sigma", "nu", "delta"):
            if np.any(~(np.asarray(getattr(self, name)) > 0)):
                raise InvalidParameterError(f"Kernel parameter {name} must be positive")

    @classmethod
    def from_model(cls, model: DiffusionModel, x_k, y_k: float, t_k: float, dt: float) -> KernelParams:
        return cls(
            dt=dt,
            sigma=model.signal_vol(x_k, t_k),
            drift_signal=model.signal_drift(x_k, t_k),
            nu=model.obs_vol_shared(y_k, t_k),
            delta=model.obs_vol_idio(y_k, t_k),
            drift_obs=model.obs_drift(y_k, x_k, t_k),
        )


def _log_kernel(dt, sigma, nu, delta, signal_residual, obs_residual, log_prefactor):
    spread = signal_residual / sigma - obs_residual / nu
    return log_prefactor - nu**2 / (2.0 * delta**2 * dt) * spread**2


def log_kernel_g(
    p: KernelParams, x_k, y_k, x_next, y_next, normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO
):
    """Log of the Gaussian observation kernel on Euler dynamics.

    :param KernelParams p: coefficients frozen at (x_k, y_k, t_k)
    :param KernelNormalization normalization:
    :return: log g_k, broadcast over the state arguments
    """
    mean_signal = np.asarray(x_k) + p.drift_signal * p.dt
    mean_obs = np.asarray(y_k) + p.drift_obs * p.dt
    if normalization is KernelNormalization.VERBATIM:
        log_prefactor = -1.5 * (_LOG_2PI + np.log(p.dt)) - 2.0 * np.log(p.sigma) - np.log(p.delta)
    else:
        log_prefactor = -0.5 * (_LOG_2PI + np.log(p.dt)) - np.log(p.delta)
    return _log_kernel(p.dt, p.sigma, p.nu, p.delta, x_next - mean_signal, y_next - mean_obs, log_prefactor)


def kernel_g(
    p: KernelParams, x_k, y_k, x_next, y_next, normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO
):
    return np.exp(log_kernel_g(p, x_k, y_k, x_next, y_next, normalization))[()]


def log_kernel_g_lognormal(
    mu: float,
    sigma: float,
    r: float,
    nu: float,
    delta: float,
    dt: float,
    x_k,
    y_k,
    x_next,
    y_next,
    normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO,
):
    """Log of the observation kernel for exact Black-Scholes dynamics, with residuals on log-levels.

    :raises InvalidParameterError: non-positive state value
    """
    arrays = [np.asarray(v, dtype=float) for v in (x_k, y_k, x_next, y_next)]
    if any(np.any(~(v > 0)) for v in arrays):
        raise InvalidParameterError("The lognormal kernel needs strictly positive states")
    if min(sigma, nu, delta, dt) <= 0:
        raise InvalidParameterError(f"Need positive sigma, nu, delta and dt, got {sigma=}, {nu=}, {delta=}, {dt=}")

    log_x, log_y, log_x_next, log_y_next = (np.log(v) for v in arrays)
    mean_signal = log_x + (mu - 0.5 * sigma**2) * dt
    mean_obs = log_y + (r - 0.5 * nu**2 - 0.5 * delta**2) * dt
    if normalization is KernelNormalization.VERBATIM:
        log_prefactor = (
            -1.5 * (_LOG_2PI + math.log(dt)) - 2.0 * math.log(sigma) - math.log(delta) - 2.0 * log_x_next - log_y_next
        )
    else:
        log_prefactor = -0.5 * (_LOG_2PI + math.log(dt)) - math.log(delta) - log_y_next
    return _log_kernel(dt, sigma, nu, delta, log_x_next - mean_signal, log_y_next - mean_obs, log_prefactor)


def kernel_g_lognormal(*args, **kwargs):
    return np.exp(log_kernel_g_lognormal(*args, **kwargs))[()]


def _lognormal_params(model: DiffusionModel) -> dict[str, float]:
    if model.family != "gbm":
        raise InvalidParameterError(f"The lognormal kernel needs the gbm preset, got {model.family=}")
    return {name: model.params[name] for name in ("mu", "sigma", "r", "nu", "delta")}


def step_log_kernel(
    model: DiffusionModel,
    kernel: Kernel,
    x_prev,
    y_prev: float,
    x_next,
    y_next: float,
    t_prev: float,
    dt: float,
    normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO,
):
    """log g between every x_prev and every x_next (broadcasting) for one observation step."""
    if kernel is Kernel.LOGNORMAL:
        params = _lognormal_params(model)
        return log_kernel_g_lognormal(
            **params, dt=dt, x_k=x_prev, y_k=y_prev, x_next=x_next, y_next=y_next, normalization=normalization
        )
    p = KernelParams.from_model(model, x_prev, y_prev, t_prev, dt)
    return log_kernel_g(p, x_prev, y_prev, x_next, y_next, normalization)


def step_barrier_factor(
    model: DiffusionModel, kernel: Kernel, x_prev, x_next, t_prev: float, dt: float, barrier: float
):
    """G on one step: bridge of the continuous Euler scheme, or of log-levels for exact Black-Scholes dynamics."""
    if kernel is Kernel.LOGNORMAL:
        return gbm_no_cross_factor(x_prev, x_next, model.params["sigma"], dt, barrier)
    variance = dt * model.signal_vol(x_prev, t_prev) ** 2
    return no_cross_values(x_prev, x_next, variance, barrier)


@dataclass(frozen=True)
class FilterState:
    """Filter vectors at the observation horizon on the terminal signal grid.

    `pi_hat` carries the barrier factors, `varpi_hat` does not; both share the rescaling exp(log_scale).
    `normalized_weights` is Π̂ = pi_hat / Σ varpi_hat.
    """

    pi_hat: np.ndarray
    varpi_hat: np.ndarray
    log_scale: float
    normalized_weights: np.ndarray
    support: np.ndarray

    @property
    def posterior(self) -> np.ndarray:
        """Conditional law of the signal at t_m on the support, ignoring the barrier."""
        return self.varpi_hat / self.varpi_hat.sum()

    @property
    def survival_to_observation_horizon(self) -> float:
        return float(np.clip(self.normalized_weights.sum(), 0.0, 1.0))


@with_module_context("filter")
@timed
def filter_recursion(
    mq: MarginalQuantization,
    obs,
    model: DiffusionModel,
    barrier: float,
    kernel: Kernel = Kernel.GAUSSIAN,
    normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO,
) -> FilterState:
    """Forward recursion of π̂ (with G) and ϖ̂ (without) from the point mass at x0.

    Both vectors are divided by max(ϖ̂) after every step and the logarithm of the factor is kept in `log_scale`.

    :param MarginalQuantization mq:
    :param obs: y_0..y_m
    :param DiffusionModel model:
    :param float barrier: a
    :param Kernel kernel:
    :param KernelNormalization normalization:
    :raises ShapeError: observation count does not match the grid
    :raises FilterDegenerateError: every likelihood vanished at a step
    :return FilterState:
    """
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (mq.m + 1,):
        raise ShapeError(f"Expected {mq.m + 1} observations, got shape {obs.shape}")

    pi_hat = np.ones(1)
    varpi_hat = np.ones(1)
    log_scale = 0.0
    for k, transition in mq.iter_transitions():
        t_prev, dt = mq.times[k - 1], mq.times[k] - mq.times[k - 1]
        x_prev = mq.signal_grids[k - 1][:, None]
        x_next = mq.signal_grids[k][None, :]

        log_g = step_log_kernel(model, kernel, x_prev, obs[k - 1], x_next, obs[k], t_prev, dt, normalization)
        shift = float(np.max(log_g))
        upsilon = np.exp(log_g - shift) * transition
        barrier_factor = step_barrier_factor(model, kernel, x_prev, x_next, t_prev, dt, barrier)

        varpi_next = varpi_hat @ upsilon
        pi_next = pi_hat @ (upsilon * barrier_factor)
        scale = float(np.max(varpi_next))
        if not np.isfinite(shift) or not scale > 0 or not np.isfinite(scale):
            raise FilterDegenerateError(k)

        varpi_hat, pi_hat = varpi_next / scale, pi_next / scale
        log_scale += shift + math.log(scale)
        logger.debug(f"Filter step {k}: log_scale={log_scale:.3f} mass={pi_hat.sum() / varpi_hat.sum():.6f}")

    normalized = pi_hat / varpi_hat.sum()
    return FilterState(pi_hat, varpi_hat, log_scale, normalized, mq.support.copy())


def load_observations(path: str | Path, grid: TimeGrid) -> np.ndarray:
    """Reads y_0..y_m from a CSV with columns t_k and y_k, checking the times against the grid.

    :param str | Path path:
    :param TimeGrid grid:
    :raises ShapeError: wrong columns, row count or times
    :return np.ndarray:
    """
    try:
        frame = nw.read_csv(str(path), backend="polars")
        missing = set(OBSERVATION_INPUT_SCHEMA) - set(frame.columns)
        if missing:
            raise ShapeError(f"Observation file {path} lacks columns {sorted(missing)}")
        frame = frame.select([nw.col(name).cast(dtype) for name, dtype in OBSERVATION_INPUT_SCHEMA.items()])
    except (NarwhalsError, PolarsError) as e:
        raise ShapeError(f"Observation file {path} is not a numeric t_k, y_k table: {e}") from e

    times = frame["t_k"].to_numpy()
    expected = grid.times[: grid.m + 1]
    if times.shape != expected.shape or not np.allclose(times, expected, rtol=0.0, atol=1e-9):
        raise ShapeError(f"Observation times in {path} do not match the {grid.m + 1} grid times on [0, {grid.s}]")
    logger.info(f"Loaded {times.size} observations from {path}")
    return frame["y_k"].to_numpy().astype(float)
