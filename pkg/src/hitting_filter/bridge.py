from dataclasses import dataclass

import numpy as np

from hitting_filter.exceptions import InvalidParameterError, ShapeError

_TINY = np.finfo(float).tiny


@dataclass(frozen=True)
class BridgeParams:
    """Endpoints of one step and the frozen variance Δ_k·σ²(x_k, t_k)."""

    x_left: float | np.ndarray
    x_right: float | np.ndarray
    var: float | np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.var) > 0)):
            raise InvalidParameterError(f"Bridge variance must be positive, got {self.var=}")


def no_cross_values(x_left, x_right, var, a):
    """Unchecked no-crossing factor on raw arrays; a vanishing variance is treated as a frozen path."""
    x_left, x_right = np.asarray(x_left, dtype=float), np.asarray(x_right, dtype=float)
    above = (x_left >= a) & (x_right >= a)
    exponent = -2.0 * (x_left - a) * (x_right - a) / np.maximum(var, _TINY)
    # exp underflows to 0 for very negative exponents, which is the correct limit G = 1
    return np.where(above, -np.expm1(np.minimum(exponent, 0.0)), 0.0)


def bridge_min_cdf(p: BridgeParams, u):
    """P(min of the bridge over the step <= u | endpoints).

    :param BridgeParams p:
    :param float | np.ndarray u: level
    :return: probability in [0, 1]
    """
    u = np.asarray(u, dtype=float)
    lowest = np.minimum(p.x_left, p.x_right)
    exponent = -2.0 * (u - p.x_left) * (u - p.x_right) / p.var
    value = np.where(u <= lowest, np.exp(np.minimum(exponent, 0.0)), 1.0)
    return np.clip(value, 0.0, 1.0)[()]


def no_cross_factor(p: BridgeParams, a):
    """Probability that the bridge stays above the barrier `a` on the step; 0 if an endpoint is below it.

    :param BridgeParams p:
    :param float a: barrier
    :return: probability in [0, 1]
    """
    return no_cross_values(p.x_left, p.x_right, p.var, a)[()]


def gbm_no_cross_factor(x_left, x_right, sigma: float, dt: float, a: float):
    """No-crossing factor of an exact geometric Brownian step, i.e. the bridge factor on log-levels.

    The drift does not enter: conditioned on both endpoints, log X is a Brownian bridge with variance σ²Δ.
    A non-positive barrier can never be reached.
    """
    x_left, x_right = np.asarray(x_left, dtype=float), np.asarray(x_right, dtype=float)
    if a <= 0:
        return np.ones(np.broadcast_shapes(x_left.shape, x_right.shape))[()]
    if sigma <= 0 or dt <= 0:
        raise InvalidParameterError(f"Need sigma > 0 and dt > 0, got {sigma=}, {dt=}")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_left = np.log(np.where(x_left > 0, x_left, np.nan))
        log_right = np.log(np.where(x_right > 0, x_right, np.nan))
    value = no_cross_values(log_left, log_right, sigma**2 * dt, np.log(a))
    return np.nan_to_num(value, nan=0.0)[()]


def interval_survival_product(path, vols, dts, a):
    """Product of the no-crossing factors over consecutive points of `path`.

    A path with fewer than two points is an empty product and gives 1. A leading batch axis is allowed, with the
    time axis last.

    :param np.ndarray path: grid values x_k..x_l
    :param np.ndarray vols: σ(x_j, t_j) for j = k..l-1
    :param np.ndarray dts: step lengths
    :param float a: barrier
    :raises ShapeError: lengths do not line up
    :return: probability in [0, 1]
    """
    path = np.asarray(path, dtype=float)
    if path.shape[-1] < 2:
        return np.ones(path.shape[:-1])[()]

    vols = np.asarray(vols, dtype=float)
    dts = np.asarray(dts, dtype=float)
    steps = path.shape[-1] - 1
    if vols.shape[-1] != steps or dts.shape[-1] != steps:
        raise ShapeError(f"Expected {steps} vols and steps, got {vols.shape[-1]} and {dts.shape[-1]}")

    p = BridgeParams(path[..., :-1], path[..., 1:], dts * vols**2)
    return np.prod(no_cross_factor(p, a), axis=-1)[()]


def sample_interval_min(p: BridgeParams, uniform):
    """Inverse-CDF draw of the bridge minimum; always below both endpoints.

    :param BridgeParams p:
    :param float | np.ndarray uniform: draws in (0, 1)
    :raises InvalidParameterError: draw outside (0, 1)
    """
    uniform = np.asarray(uniform, dtype=float)
    if np.any((uniform <= 0) | (uniform >= 1)):
        raise InvalidParameterError("Uniform draws must lie in the open interval (0, 1)")
    gap = p.x_left - p.x_right
    return ((p.x_left + p.x_right - np.sqrt(gap**2 - 2.0 * p.var * np.log(uniform))) / 2.0)[()]
