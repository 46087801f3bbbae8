from __future__ import annotations

import enum
import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from hitting_filter.exceptions import InvalidModelError, InvalidParameterError, raise_if_not_finite

logger = logging.getLogger(__name__)

Coefficient = Callable[[np.ndarray, float], np.ndarray]
ObservationDrift = Callable[[np.ndarray, np.ndarray, float], np.ndarray]
# (x, y, dt, z, z_tilde) -> (x_next, y_next), z driving both equations and z_tilde the observation only
ExactTransition = Callable[
    [np.ndarray, np.ndarray, float, np.ndarray, np.ndarray],
    tuple[np.ndarray, np.ndarray],
]


class Scheme(enum.Enum):
    EULER = "euler"
    EXACT = "exact"


def _evaluate(func: Callable, x: np.ndarray, *args) -> np.ndarray:
    """Evaluates a coefficient and broadcasts it to the shape of its first argument."""
    value = np.asarray(func(x, *args), dtype=float)
    return np.broadcast_to(value, np.broadcast_shapes(np.shape(x), value.shape))


@dataclass(frozen=True)
class DiffusionModel:
    """Signal X and observation Y driven by a shared Brownian motion W and an idiosyncratic one W~.

    dX = b(X,t) dt + sigma(X,t) dW
    dY = h(Y,X,t) dt + nu(Y,t) dW + delta(Y,t) dW~

    Coefficients are vectorised callables; `vol_signal_deriv` is the spatial derivative of sigma used by the
    quantized-diffusion ODE.
    """

    drift_signal: Coefficient
    vol_signal: Coefficient
    drift_obs: ObservationDrift
    vol_obs_shared: Coefficient
    vol_obs_idio: Coefficient
    x0: float
    y0: float
    vol_signal_deriv: Coefficient
    family: str | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    exact_transition: ExactTransition | None = field(default=None, repr=False)

    def signal_drift(self, x, t: float) -> np.ndarray:
        return _evaluate(self.drift_signal, x, t)

    def signal_vol(self, x, t: float) -> np.ndarray:
        return _evaluate(self.vol_signal, x, t)

    def signal_vol_deriv(self, x, t: float) -> np.ndarray:
        return _evaluate(self.vol_signal_deriv, x, t)

    def obs_drift(self, y, x, t: float) -> np.ndarray:
        value = np.asarray(self.drift_obs(y, x, t), dtype=float)
        return np.broadcast_to(value, np.broadcast_shapes(np.shape(y), np.shape(x), value.shape))

    def obs_vol_shared(self, y, t: float) -> np.ndarray:
        return _evaluate(self.vol_obs_shared, y, t)

    def obs_vol_idio(self, y, t: float) -> np.ndarray:
        return _evaluate(self.vol_obs_idio, y, t)

    def validate(self, barrier: float | None = None, horizon: float = 1.0, samples: int = 64) -> None:
        """Checks positivity of the volatilities on a sampled working domain.

        The domain spans from the barrier (or half the initial level) up to a few times the distance
        between the initial level and the barrier, over [0, horizon].

        :param float | None barrier: barrier the model will be used with
        :param float horizon: last time of interest
        :param int samples: points per axis
        :raises InvalidModelError:
        """
        errors = []
        if barrier is not None and not self.x0 > barrier:
            errors.append(f"x0={self.x0} must lie strictly above the barrier a={barrier}")

        def domain(start: float) -> np.ndarray:
            if barrier is not None and barrier < start:
                low = barrier
            else:
                low = start - 0.5 * abs(start) if start != 0 else -1.0
            high = start + 3.0 * (start - low)
            return np.linspace(low, high, samples)

        times = np.linspace(0.0, horizon, samples)
        xs = domain(self.x0)
        ys = domain(self.y0)
        checks = {
            "vol_signal": lambda t: self.signal_vol(xs, t),
            "vol_obs_shared": lambda t: self.obs_vol_shared(ys, t),
            "vol_obs_idio": lambda t: self.obs_vol_idio(ys, t),
        }
        for name, check in checks.items():
            if any(not np.all(check(t) > 0) for t in times):
                errors.append(f"{name} must be strictly positive on the working domain")

        if errors:
            raise InvalidModelError("; ".join(errors))

    def with_params(self, **updates: float) -> DiffusionModel:
        """Rebuilds a preset model with some parameters (or x0/y0) replaced."""
        if self.family not in _FACTORIES:
            raise InvalidParameterError(f"Only preset models can be rebuilt, got {self.family=}")
        params = dict(self.params) | {"x0": self.x0, "y0": self.y0} | updates
        return _FACTORIES[self.family](**params)


@dataclass(frozen=True)
class TimeGrid:
    """Two-segment regular grid 0 = t_0 < ... < t_m = s < ... < t_n = t."""

    times: np.ndarray
    m: int

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

        if times.ndim != 1 or times.size < 2:
            raise InvalidParameterError(f"A grid needs at least two times, got {times.size}")
        if times[0] != 0.0:
            raise InvalidParameterError(f"Grid must start at 0, got {times[0]=}")
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise InvalidParameterError("Grid times must be strictly increasing")
        if not 1 <= self.m <= times.size - 1:
            raise InvalidParameterError(f"Observation index m={self.m} outside [1, {times.size - 1}]")
        for segment in (steps[: self.m], steps[self.m :]):
            if segment.size and not np.allclose(segment, segment[0], rtol=1e-9, atol=0.0):
                raise InvalidParameterError("Each grid segment must be regularly spaced")

    @classmethod
    def uniform(cls, s: float, m: int) -> TimeGrid:
        """Observation grid t_k = k s / m, k = 0..m."""
        if m < 1 or s <= 0:
            raise InvalidParameterError(f"Need m >= 1 and s > 0, got {m=}, {s=}")
        return cls(s * np.arange(m + 1) / m, m)

    @classmethod
    def two_segment(cls, s: float, t: float, m: int, steps: int) -> TimeGrid:
        """Observation grid on [0, s] extended by `steps` regular steps on [s, t]; t == s adds none."""
        if t < s:
            raise InvalidParameterError(f"Terminal time t={t} precedes the observation horizon s={s}")
        head = cls.uniform(s, m).times
        if t == s:
            return cls(head, m)
        if steps < 1:
            raise InvalidParameterError(f"Need at least one step on [s, t], got {steps=}")
        tail = s + (t - s) * np.arange(1, steps + 1) / steps
        return cls(np.concatenate([head, tail]), m)

    @property
    def n(self) -> int:
        return self.times.size - 1

    @property
    def s(self) -> float:
        return float(self.times[self.m])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def observation_grid(self) -> TimeGrid:
        return TimeGrid(self.times[: self.m + 1], self.m)


@dataclass(frozen=True)
class PathPair:
    signal: np.ndarray
    obs: np.ndarray


def exact_gbm_step(x, mu: float, sigma: float, dt: float, z):
    """One exact step of dX = X (mu dt + sigma dW).

    :raises InvalidParameterError: non-positive level or step
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or dt <= 0:
        raise InvalidParameterError(f"Exact GBM step needs x > 0 and dt > 0, got {dt=}")
    return x * np.exp((mu - 0.5 * sigma**2) * dt + sigma * np.sqrt(dt) * np.asarray(z))


def exact_ou_step(x, lam: float, theta: float, sigma: float, dt: float, z):
    """One exact step of dX = lam (theta - X) dt + sigma dW; lam = 0 is a plain Brownian step.

    :raises InvalidParameterError: non-positive step or negative mean reversion
    """
    if dt <= 0 or lam < 0:
        raise InvalidParameterError(f"Exact OU step needs dt > 0 and lam >= 0, got {dt=}, {lam=}")
    if lam == 0:
        decay, var = 1.0, dt
    else:
        decay = np.exp(-lam * dt)
        var = -np.expm1(-2.0 * lam * dt) / (2.0 * lam)
    return theta + (np.asarray(x, dtype=float) - theta) * decay + sigma * np.sqrt(var) * np.asarray(z)


def euler_signal_step(model: DiffusionModel, x, t: float, dt: float, dw):
    return x + model.signal_drift(x, t) * dt + model.signal_vol(x, t) * dw


def simulate_pair(
    model: DiffusionModel, grid: TimeGrid, rng: np.random.Generator, scheme: Scheme = Scheme.EULER
) -> PathPair:
    """Simulates the signal up to t_n and the observation up to t_m with a shared W.

    The n increments of W are drawn first and the m increments of W~ second, so a given stream yields the same
    drivers whatever the idiosyncratic volatility is.

    :param DiffusionModel model:
    :param TimeGrid grid:
    :param np.random.Generator rng:
    :param Scheme scheme: Euler recursion or the model's exact transition
    :raises SimulationDivergedError:
    :return PathPair: signal of length n+1, observations of length m+1
    """
    if scheme is Scheme.EXACT and model.exact_transition is None:
        raise InvalidParameterError("This model has no exact transition; use the Euler scheme")

    n, m = grid.n, grid.m
    dt = grid.steps
    z = rng.standard_normal(n)
    z_tilde = rng.standard_normal(m)

    x = np.empty(n + 1)
    y = np.empty(m + 1)
    x[0], y[0] = model.x0, model.y0
    for k in range(n):
        t = grid.times[k]
        if scheme is Scheme.EXACT:
            y_k = y[k] if k < m else y[m]
            x_next, y_next = model.exact_transition(x[k], y_k, dt[k], z[k], z_tilde[k] if k < m else 0.0)
            x[k + 1] = x_next
            if k < m:
                y[k + 1] = y_next
        else:
            dw = np.sqrt(dt[k]) * z[k]
            x[k + 1] = x[k] + model.signal_drift(x[k], t) * dt[k] + model.signal_vol(x[k], t) * dw
            if k < m:
                y[k + 1] = (
                    y[k]
                    + model.obs_drift(y[k], x[k], t) * dt[k]
                    + model.obs_vol_shared(y[k], t) * dw
                    + model.obs_vol_idio(y[k], t) * (np.sqrt(dt[k]) * z_tilde[k])
                )
        raise_if_not_finite(x[k + 1 : k + 2], step=k + 1)
        if k < m:
            raise_if_not_finite(y[k + 1 : k + 2], step=k + 1)

    return PathPair(signal=x, obs=y)


def simulate_signal_paths(model: DiffusionModel, x_start, times: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Vectorised Euler paths of the signal over `times`, one row per row of `normals`.

    :param DiffusionModel model:
    :param float | np.ndarray x_start: common start or one start per path
    :param np.ndarray times: grid times, length L+1
    :param np.ndarray normals: standard normal draws of shape (P, L)
    :raises SimulationDivergedError: with the index of the step relative to `times`
    :return np.ndarray: paths of shape (P, L+1)
    """
    normals = np.atleast_2d(normals)
    dt = np.diff(times)
    if normals.shape[1] != dt.size:
        raise InvalidParameterError(f"Expected {dt.size} normals per path, got {normals.shape[1]}")

    paths = np.empty((normals.shape[0], dt.size + 1))
    paths[:, 0] = x_start
    for k in range(dt.size):
        paths[:, k + 1] = euler_signal_step(model, paths[:, k], times[k], dt[k], np.sqrt(dt[k]) * normals[:, k])
        raise_if_not_finite(paths[:, k + 1], step=k + 1)
    return paths


def simulate_signal_segment(
    model: DiffusionModel, x_start: float, k_start: int, k_end: int, grid: TimeGrid, rng: np.random.Generator
) -> np.ndarray:
    """Restarts the Euler scheme at grid index `k_start` from `x_start` and runs it up to `k_end`."""
    if not 0 <= k_start < k_end <= grid.n:
        raise InvalidParameterError(f"Need 0 <= k_start < k_end <= n={grid.n}, got {k_start=}, {k_end=}")
    normals = rng.standard_normal((1, k_end - k_start))
    return simulate_signal_paths(model, x_start, grid.times[k_start : k_end + 1], normals)[0]


def gbm_model(
    mu: float,
    sigma: float,
    delta: float,
    x0: float,
    y0: float,
    r: float | None = None,
    nu: float | None = None,
) -> DiffusionModel:
    """Black-Scholes pair dX = X(mu dt + sigma dW), dY = Y(r dt + nu dW + delta dW~).

    The observation drift and shared volatility default to the signal's.
    """
    r = mu if r is None else r
    nu = sigma if nu is None else nu

    def exact(x, y, dt, z, z_tilde):
        x_next = exact_gbm_step(x, mu, sigma, dt, z)
        y_next = y * np.exp((r - 0.5 * nu**2 - 0.5 * delta**2) * dt + np.sqrt(dt) * (nu * z + delta * z_tilde))
        return x_next, y_next

    return DiffusionModel(
        drift_signal=lambda x, t: mu * np.asarray(x),
        vol_signal=lambda x, t: sigma * np.asarray(x),
        drift_obs=lambda y, x, t: r * np.asarray(y),
        vol_obs_shared=lambda y, t: nu * np.asarray(y),
        vol_obs_idio=lambda y, t: delta * np.asarray(y),
        x0=float(x0),
        y0=float(y0),
        vol_signal_deriv=lambda x, t: np.full(np.shape(x), sigma),
        family="gbm",
        params=MappingProxyType({"mu": mu, "sigma": sigma, "delta": delta, "r": r, "nu": nu}),
        exact_transition=exact,
    )


def ou_model(lam: float, theta: float, sigma: float, delta: float, x0: float, y0: float) -> DiffusionModel:
    """Ornstein-Uhlenbeck pair sharing lam, theta and sigma; Y - X is an OU process with volatility delta."""

    def exact(x, y, dt, z, z_tilde):
        x_next = exact_ou_step(x, lam, theta, sigma, dt, z)
        spread_next = exact_ou_step(np.asarray(y) - np.asarray(x), lam, 0.0, delta, dt, z_tilde)
        return x_next, x_next + spread_next

    return DiffusionModel(
        drift_signal=lambda x, t: lam * (theta - np.asarray(x)),
        vol_signal=lambda x, t: np.full(np.shape(x), sigma),
        drift_obs=lambda y, x, t: lam * (theta - np.asarray(y)),
        vol_obs_shared=lambda y, t: np.full(np.shape(y), sigma),
        vol_obs_idio=lambda y, t: np.full(np.shape(y), delta),
        x0=float(x0),
        y0=float(y0),
        vol_signal_deriv=lambda x, t: np.zeros(np.shape(x)),
        family="ou",
        params=MappingProxyType({"lam": lam, "theta": theta, "sigma": sigma, "delta": delta}),
        exact_transition=exact,
    )


_FACTORIES: dict[str, Callable[..., DiffusionModel]] = {"gbm": gbm_model, "ou": ou_model}
