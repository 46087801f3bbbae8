from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import ModuleType

import narwhals as nw
import numpy as np
from scipy.special import ndtr

from hitting_filter.bridge import no_cross_values
from hitting_filter.exceptions import InvalidParameterError, ShapeError, raise_if_not_finite
from hitting_filter.filtering import FilterState, Kernel, KernelNormalization, filter_recursion
from hitting_filter.models import DiffusionModel, TimeGrid
from hitting_filter.quantization import MarginalQuantization, build_marginal_quantization
from hitting_filter.schemas import SURVIVAL_CURVE_SCHEMA
from hitting_filter.utils import parallel_map, timed, with_module_context

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FbarEstimate:
    value: float
    std_err: float


@dataclass(frozen=True)
class Budgets:
    """Sizes of one run: quantization budget N, Euler steps on [t_m, t_n] and Monte Carlo trials M."""

    quantization: int
    steps: int
    trials: int

    def __post_init__(self):
        if min(self.quantization, self.steps, self.trials) < 1:
            raise InvalidParameterError(f"All budgets must be >= 1, got {self}")


def continuation_survival(model: DiffusionModel, starts, t_m: float, t_n: float, normals: np.ndarray, a: float):
    """Bridge-corrected survival of each Euler segment over [t_m, t_n], one column of `normals` per segment.

    :param starts: start values at t_m, a scalar or one per column
    :param np.ndarray normals: shape (steps, segments)
    :raises SimulationDivergedError:
    :return np.ndarray: product of no-crossing factors per segment, 0 where the start is at or below a
    """
    steps = normals.shape[0]
    times = np.linspace(t_m, t_n, steps + 1)
    state = np.broadcast_to(np.asarray(starts, dtype=float), normals.shape[1:]).copy()
    survival = (state > a).astype(float)
    for k in range(steps):
        dt = times[k + 1] - times[k]
        vol = model.signal_vol(state, times[k])
        following = state + model.signal_drift(state, times[k]) * dt + vol * math.sqrt(dt) * normals[k]
        raise_if_not_finite(following, step=k + 1)
        survival *= no_cross_values(state, following, dt * vol**2, a)
        state = following
    return survival


def fbar_from_normals(model: DiffusionModel, x: float, t_m: float, t_n: float, normals: np.ndarray, a: float):
    """F̄(t_m, t_n, x) from Euler segments driven by `normals` of shape (steps, M), with bridge products.

    Sharing `normals` across start values and horizons gives common random numbers.

    :return FbarEstimate:
    """
    if t_n < t_m:
        raise InvalidParameterError(f"Need t_n >= t_m, got {t_m=}, {t_n=}")
    if t_n == t_m:
        return FbarEstimate(1.0, 0.0)
    if x <= a:
        return FbarEstimate(0.0, 0.0)

    trials = normals.shape[1]
    survival = continuation_survival(model, x, t_m, t_n, normals, a)
    std_err = float(survival.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return FbarEstimate(float(survival.mean()), std_err)


def fbar_mc(
    model: DiffusionModel, x: float, t_m: float, t_n: float, steps: int, trials: int, a: float, rng: np.random.Generator
) -> FbarEstimate:
    """Monte Carlo F̄: mean over `trials` Euler segments started at x of the product of no-crossing factors.

    :param DiffusionModel model:
    :param float x: signal value at t_m
    :param float t_m:
    :param float t_n:
    :param int steps: Euler steps on [t_m, t_n]
    :param int trials: M
    :param float a: barrier
    :param np.random.Generator rng:
    :raises SimulationDivergedError:
    :return FbarEstimate: value and standard error
    """
    if steps < 1 or trials < 1:
        raise InvalidParameterError(f"Need steps >= 1 and trials >= 1, got {steps=}, {trials=}")
    return fbar_from_normals(model, x, t_m, t_n, rng.standard_normal((steps, trials)), a)


def euler_discrete_survival(
    model: DiffusionModel, x: float, t_m: float, t_n: float, steps: int, trials: int, a: float, rng: np.random.Generator
) -> FbarEstimate:
    """Survival with the barrier only monitored at the Euler grid times, without bridge correction."""
    if x <= a:
        return FbarEstimate(0.0, 0.0)
    normals = rng.standard_normal((steps, trials))
    times = np.linspace(t_m, t_n, steps + 1)
    state = np.full(trials, float(x))
    alive = np.ones(trials, dtype=bool)
    for k in range(steps):
        dt = times[k + 1] - times[k]
        dw = math.sqrt(dt) * normals[k]
        state = state + model.signal_drift(state, times[k]) * dt + model.signal_vol(state, times[k]) * dw
        raise_if_not_finite(state, step=k + 1)
        alive &= state > a

    survival = alive.astype(float)
    std_err = float(survival.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return FbarEstimate(float(survival.mean()), std_err)


def gbm_survival_closed_form(x, mu: float, sigma: float, a: float, horizon: float):
    """P(min of a geometric Brownian motion started at x stays above a over `horizon`).

    N(h1) - (a/x)^{2(μ - σ²/2)/σ²} N(h2), with h1,2 = (±log(x/a) + (μ - σ²/2) u) / (σ sqrt(u)). Values at or below
    the barrier give 0.

    :param float | np.ndarray x: start levels
    :param float mu:
    :param float sigma:
    :param float a: barrier > 0
    :param float horizon: u = t - s >= 0
    :return: probability in [0, 1]
    """
    if a <= 0 or sigma <= 0 or horizon < 0:
        raise InvalidParameterError(f"Need a > 0, sigma > 0 and horizon >= 0, got {a=}, {sigma=}, {horizon=}")
    x = np.asarray(x, dtype=float)
    above = x > a
    if horizon == 0:
        return above.astype(float)[()]

    safe_x = np.where(above, x, 2.0 * a)
    drift = mu - 0.5 * sigma**2
    log_ratio = np.log(safe_x / a)
    scale = sigma * math.sqrt(horizon)
    h1 = (log_ratio + drift * horizon) / scale
    h2 = (-log_ratio + drift * horizon) / scale
    reflection = np.exp(-2.0 * drift / sigma**2 * log_ratio)
    value = np.clip(ndtr(h1) - reflection * ndtr(h2), 0.0, 1.0)
    return np.where(above, value, 0.0)[()]


def conditional_survival(state: FilterState, fbar_values) -> float:
    """Σ_i Π̂_i F̄_i, summed in grid order and clamped to [0, 1].

    :raises ShapeError: `fbar_values` not aligned with the filter support
    """
    fbar_values = np.asarray(fbar_values, dtype=float)
    if fbar_values.shape != state.normalized_weights.shape:
        raise ShapeError(f"Expected {state.normalized_weights.shape} F̄ values, got {fbar_values.shape}")
    return float(np.clip(np.sum(state.normalized_weights * fbar_values), 0.0, 1.0))


@dataclass(frozen=True)
class SurvivalCurve:
    horizons: np.ndarray
    probabilities: np.ndarray
    std_errors: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def hitting_cdf(self) -> np.ndarray:
        return 1.0 - self.probabilities

    def to_frame(self, backend: ModuleType | nw.Implementation | str = "polars") -> nw.DataFrame:
        data = {
            "t_n": self.horizons,
            "survival_prob": self.probabilities,
            "hitting_cdf": self.hitting_cdf,
            "std_err": self.std_errors,
        }
        return nw.from_dict(data, SURVIVAL_CURVE_SCHEMA, backend=backend)

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().write_csv(str(path))

    def write_sidecar(self, path: str | Path, config: dict | None = None) -> None:
        """JSON with the run metadata and, when given, the full configuration needed to rerun it."""
        payload = {"meta": self.meta} | ({"config": config} if config is not None else {})
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


@with_module_context("survival")
@timed
def survival_curve(
    model: DiffusionModel,
    obs,
    grid: TimeGrid,
    barrier: float,
    horizons,
    budgets: Budgets,
    kernel: Kernel = Kernel.GAUSSIAN,
    rng: np.random.Generator | None = None,
    *,
    normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO,
    force_mc_fbar: bool = False,
    workers: int | None = None,
    weight_floor: float = 0.0,
    quantization: MarginalQuantization | None = None,
    seed: int | None = None,
) -> SurvivalCurve:
    """Conditional survival P(τ_a > t_n | y_0..y_m) for every horizon t_n.

    The quantization and the filter are built once. F̄ comes from the closed form for the gbm preset unless
    `force_mc_fbar`, otherwise from Euler segments sharing one block of normals across grid points and horizons.

    :param DiffusionModel model:
    :param obs: y_0..y_m
    :param TimeGrid grid: observation grid on [0, t_m]
    :param float barrier: a
    :param horizons: increasing t_n > t_m
    :param Budgets budgets:
    :param Kernel kernel:
    :param np.random.Generator | None rng: required for Monte Carlo F̄
    :param bool force_mc_fbar: use Monte Carlo F̄ even when the closed form applies
    :param int | None workers: threads for the quantized flow and the F̄ evaluations
    :param float weight_floor: grid points whose weight does not exceed it get F̄ = 0 without evaluation
    :param MarginalQuantization | None quantization: prebuilt marginal quantization on `grid`
    :param int | None seed: recorded in the curve metadata
    :return SurvivalCurve:
    """
    horizons = np.asarray(horizons, dtype=float)
    if horizons.ndim != 1 or horizons.size == 0:
        raise InvalidParameterError("At least one horizon is required")
    if np.any(horizons <= grid.s) or np.any(np.diff(horizons) <= 0):
        raise InvalidParameterError(f"Horizons must be increasing and beyond t_m={grid.s}")

    mq = quantization or build_marginal_quantization(model, grid, budgets.quantization, workers)
    state = filter_recursion(mq, obs, model, barrier, kernel, normalization)
    logger.info(f"Survival to t_m={grid.s}: {state.survival_to_observation_horizon:.6f} on d_N={mq.size} points")

    closed_form = model.family == "gbm" and not force_mc_fbar
    active = state.normalized_weights > weight_floor if weight_floor > 0 else np.ones(mq.size, dtype=bool)
    support = state.support
    if not closed_form:
        if rng is None:
            raise InvalidParameterError("A random generator is required for Monte Carlo F̄")
        normals = rng.standard_normal((budgets.steps, budgets.trials))

    probabilities, std_errors = [], []
    for t_n in horizons:
        fbar = np.zeros(mq.size)
        fbar_std = np.zeros(mq.size)
        if closed_form:
            mu, sigma = model.params["mu"], model.params["sigma"]
            fbar[active] = gbm_survival_closed_form(support[active], mu, sigma, barrier, t_n - grid.s)
        else:
            estimates = parallel_map(
                lambda x, t_n=t_n: fbar_from_normals(model, x, grid.s, t_n, normals, barrier), support[active], workers
            )
            fbar[active] = [e.value for e in estimates]
            fbar_std[active] = [e.std_err for e in estimates]

        probabilities.append(conditional_survival(state, fbar))
        std_errors.append(float(np.sum(state.normalized_weights * fbar_std)))
        logger.debug(f"t_n={t_n:.4f}: survival={probabilities[-1]:.6f}")

    meta = {
        "seed": seed,
        "N": budgets.quantization,
        "d_N": mq.size,
        "m": grid.m,
        "t_m": grid.s,
        "steps": budgets.steps,
        "M": budgets.trials,
        "kernel": kernel.value,
        "fbar": "closed_form" if closed_form else "monte_carlo",
        "survival_to_t_m": state.survival_to_observation_horizon,
    }
    return SurvivalCurve(horizons, np.asarray(probabilities), np.asarray(std_errors), meta)
