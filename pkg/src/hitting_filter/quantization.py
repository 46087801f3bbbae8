from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.linalg import LinAlgError, solve_banded
from scipy.special import ndtr, ndtri
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from hitting_filter.exceptions import DegenerateGridError, InvalidParameterError, SolverError, raise_if_not_finite
from hitting_filter.models import DiffusionModel, TimeGrid
from hitting_filter.utils import parallel_map, timed, with_module_context

logger = logging.getLogger(__name__)

NEWTON_TOLERANCE = 1e-12
NEWTON_MAX_ITERATIONS = 200
NEWTON_ATTEMPTS = 3
LLOYD_TOLERANCE = 1e-10
LLOYD_MAX_ITERATIONS = 50_000
MAX_COORDINATE_SIZE = 200
ODE_SUBSTEPS = 10
TIE_BREAK = 1e-12

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _pdf(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


def gaussian_cell_mass(lo, hi):
    """P(lo < Z <= hi) for Z ~ N(0, 1), using the upper tail when the cell lies right of 0."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    return np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def _first_moment(lo, hi):
    """E[Z 1{lo < Z <= hi}]."""
    return _pdf(lo) - _pdf(hi)


def _second_moment(lo, hi):
    """E[Z² 1{lo < Z <= hi}]."""

    def x_pdf(x):
        return np.where(np.isfinite(x), np.nan_to_num(x) * _pdf(x), 0.0)

    return gaussian_cell_mass(lo, hi) + x_pdf(lo) - x_pdf(hi)


def _voronoi_edges(levels: np.ndarray) -> np.ndarray:
    return np.concatenate([[-np.inf], 0.5 * (levels[1:] + levels[:-1]), [np.inf]])


@dataclass(frozen=True)
class ScalarQuantizer:
    """Sorted levels and Gaussian cell masses of a quadratic quantizer of N(0, 1)."""

    levels: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("levels", "weights"):
            array = np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        if self.levels.shape != self.weights.shape or self.levels.ndim != 1:
            raise InvalidParameterError("Levels and weights must be 1-D arrays of the same length")

    @property
    def size(self) -> int:
        return self.levels.size

    @property
    def edges(self) -> np.ndarray:
        """Voronoi cell boundaries, with -inf and +inf at both ends."""
        return _voronoi_edges(self.levels)

    @cached_property
    def distortion(self) -> float:
        """E (Z - Ẑ)², summed from the cell moments."""
        lo, hi = self.edges[:-1], self.edges[1:]
        per_cell = (
            _second_moment(lo, hi) - 2.0 * self.levels * _first_moment(lo, hi) + self.levels**2 * self.weights
        )
        return float(np.sum(per_cell))

    @cached_property
    def stationarity_residual(self) -> float:
        """Largest distance between a level and the centroid of its cell."""
        lo, hi = self.edges[:-1], self.edges[1:]
        centroids = _first_moment(lo, hi) / gaussian_cell_mass(lo, hi)
        return float(np.max(np.abs(centroids - self.levels)))


def _cell_terms(levels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    edges = _voronoi_edges(levels)
    return edges, gaussian_cell_mass(edges[:-1], edges[1:]), _first_moment(edges[:-1], edges[1:])


def _newton_levels(initial: np.ndarray, damping: float) -> np.ndarray:
    """Newton iteration on x_i P_i - E[Z 1{Z in C_i}] = 0, whose Jacobian is symmetric tridiagonal."""
    levels = initial.copy()
    residual = np.inf
    for iteration in range(NEWTON_MAX_ITERATIONS):
        edges, mass, first = _cell_terms(levels)
        gradient = levels * mass - first
        residual = float(np.max(np.abs(gradient / mass)))
        if not math.isfinite(residual):
            raise SolverError(f"Newton iterate for N={levels.size} emptied a tail cell", residual)
        if residual < NEWTON_TOLERANCE:
            logger.debug(f"Newton converged for N={levels.size} after {iteration} iterations")
            return levels

        off_diagonal = -np.diff(levels) * _pdf(edges[1:-1]) / 4.0
        banded = np.zeros((3, levels.size))
        banded[0, 1:] = off_diagonal
        banded[1] = mass
        banded[1, :-1] += off_diagonal
        banded[1, 1:] += off_diagonal
        banded[2, :-1] = off_diagonal
        try:
            step = solve_banded((1, 1), banded, gradient)
        except (LinAlgError, ValueError) as e:
            raise SolverError(f"Singular Newton system for N={levels.size}: {e}", residual) from e
        levels = levels - damping * step

        if not np.all(np.isfinite(levels)) or np.any(np.diff(levels) <= 0):
            raise SolverError(f"Newton iterate for N={levels.size} left the ordered domain", residual)
        if np.max(np.abs(step)) < 1e-15:
            return levels

    raise SolverError(f"Newton did not converge for N={levels.size} in {NEWTON_MAX_ITERATIONS} iterations", residual)


def _lloyd_levels(initial: np.ndarray) -> np.ndarray:
    levels = initial.copy()
    shift = np.inf
    for _ in range(LLOYD_MAX_ITERATIONS):
        _, mass, first = _cell_terms(levels)
        updated = first / mass
        shift = float(np.max(np.abs(updated - levels)))
        levels = updated
        if shift < LLOYD_TOLERANCE:
            return levels
    raise SolverError(f"Lloyd iteration did not converge for N={levels.size}", shift)


@lru_cache(maxsize=512)
def optimal_gaussian_quantizer(size: int) -> ScalarQuantizer:
    """Quadratic optimal quantizer of N(0, 1) with `size` levels.

    Newton's method is retried with halved damping before falling back to Lloyd's fixed-point iteration.

    :param int size: number of levels N >= 1
    :raises SolverError: neither method converged
    :return ScalarQuantizer:
    """
    if size < 1:
        raise InvalidParameterError(f"A quantizer needs at least one level, got {size=}")
    if size == 1:
        return ScalarQuantizer(np.zeros(1), np.ones(1))

    initial = ndtri((np.arange(1, size + 1) - 0.5) / size)
    try:
        for attempt in Retrying(
            stop=stop_after_attempt(NEWTON_ATTEMPTS), retry=retry_if_exception_type(SolverError), reraise=True
        ):
            with attempt:
                damping = 0.5 ** (attempt.retry_state.attempt_number - 1)
                levels = _newton_levels(initial, damping)
    except SolverError as e:
        logger.warning(f"Falling back to Lloyd iteration for N={size}: {e}")
        levels = _lloyd_levels(initial)

    levels = 0.5 * (levels - levels[::-1])
    _, mass, _ = _cell_terms(levels)
    return ScalarQuantizer(levels, mass / mass.sum())


def kl_eigenvalue(n, horizon: float):
    """λ_n = (T / (π (n - 1/2)))² of Brownian motion on [0, T]."""
    return (horizon / (np.pi * (np.asarray(n) - 0.5))) ** 2


def kl_eigenvalues(count: int, horizon: float) -> np.ndarray:
    return kl_eigenvalue(np.arange(1, count + 1), horizon)


def kl_basis(count: int, horizon: float, times) -> np.ndarray:
    """e_n(t) = sqrt(2/T) sin(π (n - 1/2) t / T) for n = 1..count, shape (count, len(times))."""
    frequencies = np.pi * (np.arange(1, count + 1)[:, None] - 0.5) / horizon
    return math.sqrt(2.0 / horizon) * np.sin(frequencies * np.atleast_1d(times)[None, :])


def kl_basis_derivative(count: int, horizon: float, times) -> np.ndarray:
    frequencies = np.pi * (np.arange(1, count + 1)[:, None] - 0.5) / horizon
    return math.sqrt(2.0 / horizon) * frequencies * np.cos(frequencies * np.atleast_1d(times)[None, :])


def kl_eigenpair(n: int, horizon: float):
    """Eigenvalue and eigenfunction of the n-th Karhunen-Loève mode of Brownian motion on [0, horizon]."""
    if n < 1 or horizon <= 0:
        raise InvalidParameterError(f"Need n >= 1 and horizon > 0, got {n=}, {horizon=}")
    return float(kl_eigenvalue(n, horizon)), lambda t: kl_basis(n, horizon, t)[n - 1]


def allocate_sizes(budget: int, horizon: float = 1.0, max_size: int = MAX_COORDINATE_SIZE) -> tuple[int, ...]:
    """Non-increasing coordinate sizes with product <= budget minimising Σ λ_n D(N_n) + Σ_{n>d} λ_n.

    Branch and bound over the sizes; coordinates of size 1 are dropped and ties go to fewer coordinates.

    :param int budget: N >= 1
    :param float horizon: T
    :param int max_size: largest size tried for a single coordinate
    :return tuple[int, ...]:
    """
    if budget < 1:
        raise InvalidParameterError(f"Quantization budget must be >= 1, got {budget=}")
    if budget == 1:
        return ()

    depth = int(math.log2(budget))
    eigenvalues = kl_eigenvalues(depth, horizon)
    cumulative = np.concatenate([[0.0], np.cumsum(eigenvalues)])
    largest = min(budget, max_size)
    gains = np.zeros(largest + 1)
    for size in range(2, largest + 1):
        gains[size] = 1.0 - optimal_gaussian_quantizer(size).distortion

    tolerance = 1e-14 * horizon**2
    best_gain, best_sizes = 0.0, ()

    def search(index: int, remaining: int, previous: int, gain: float, sizes: tuple[int, ...]):
        nonlocal best_gain, best_sizes
        if gain > best_gain + tolerance or (abs(gain - best_gain) <= tolerance and len(sizes) < len(best_sizes)):
            best_gain, best_sizes = gain, sizes
        if index >= depth:
            return
        for size in range(2, min(previous, remaining, largest) + 1):
            child_gain = gain + eigenvalues[index] * gains[size]
            rest = remaining // size
            bound = child_gain
            if rest >= 2:
                stop = min(depth, index + 1 + int(math.log2(rest)))
                bound += gains[min(size, rest)] * (cumulative[stop] - cumulative[index + 1])
            if bound + tolerance < best_gain:
                continue
            search(index + 1, rest, size, child_gain, sizes + (size,))

    search(0, budget, largest, 0.0, ())
    return best_sizes


@dataclass(frozen=True)
class ProductQuantizer:
    """Product quantizer of Brownian motion on [0, horizon] built on its Karhunen-Loève coordinates."""

    sizes: tuple[int, ...]
    quantizers: tuple[ScalarQuantizer, ...]
    horizon: float

    @classmethod
    def optimal(cls, budget: int, horizon: float) -> ProductQuantizer:
        sizes = allocate_sizes(budget, horizon)
        return cls(sizes, tuple(optimal_gaussian_quantizer(size) for size in sizes), horizon)

    @property
    def dimension(self) -> int:
        return len(self.sizes)

    @property
    def size(self) -> int:
        return math.prod(self.sizes)

    @property
    def eigenvalues(self) -> np.ndarray:
        return kl_eigenvalues(self.dimension, self.horizon)

    @property
    def distortion(self) -> float:
        """E ||W - Ŵ||² in L²([0, T]); the tail uses Σ_n λ_n = T²/2."""
        distortions = np.array([q.distortion for q in self.quantizers])
        tail = 0.5 * self.horizon**2 - float(np.sum(self.eigenvalues))
        return float(np.sum(self.eigenvalues * distortions)) + tail

    @property
    def l2_error(self) -> float:
        return math.sqrt(self.distortion)


@dataclass(frozen=True)
class BrownianCodebook:
    """Paths χ_i(t_k) of a product quantizer on the observation grid, one row per multi-index."""

    quantizer: ProductQuantizer
    coordinates: np.ndarray
    weights: np.ndarray
    times: np.ndarray
    paths: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def scaled_coordinates(self) -> np.ndarray:
        """sqrt(λ_n) x_{i_n}, the KL coefficients of every path."""
        return self.coordinates * np.sqrt(self.quantizer.eigenvalues)


def brownian_codebook(quantizer: ProductQuantizer, grid: TimeGrid) -> BrownianCodebook:
    """Evaluates every product-quantizer path at t_0..t_m.

    :param ProductQuantizer quantizer: built for T = t_m
    :param TimeGrid grid:
    :return BrownianCodebook:
    """
    if not math.isclose(quantizer.horizon, grid.s, rel_tol=1e-12):
        raise InvalidParameterError(f"Quantizer horizon {quantizer.horizon} differs from t_m={grid.s}")

    times = grid.times[: grid.m + 1]
    if quantizer.dimension == 0:
        coordinates, weights = np.zeros((1, 0)), np.ones(1)
    else:
        coordinates = np.stack(
            [mesh.ravel() for mesh in np.meshgrid(*(q.levels for q in quantizer.quantizers), indexing="ij")], axis=1
        )
        weights = np.prod(
            np.stack(
                [mesh.ravel() for mesh in np.meshgrid(*(q.weights for q in quantizer.quantizers), indexing="ij")],
                axis=1,
            ),
            axis=1,
        )

    scaled = coordinates * np.sqrt(quantizer.eigenvalues)
    paths = scaled @ kl_basis(quantizer.dimension, quantizer.horizon, times)
    return BrownianCodebook(quantizer, coordinates, weights, times, paths)


def quantized_diffusion_codebook(
    model: DiffusionModel, codebook: BrownianCodebook, substeps: int = ODE_SUBSTEPS, workers: int | None = None
) -> np.ndarray:
    """Solves dx = (b - σσ'/2) dt + σ dχ from x0 along every codebook path with fixed-step RK4.

    :param DiffusionModel model:
    :param BrownianCodebook codebook:
    :param int substeps: integrator steps per grid step
    :param int | None workers: threads sharing the codebook rows
    :raises QuantizationDivergedError: non-finite value on a path
    :return np.ndarray: shape (d_N, m+1)
    """
    times = codebook.times
    dimension, horizon = codebook.quantizer.dimension, codebook.quantizer.horizon

    def field(x, t, scaled):
        vol = model.signal_vol(x, t)
        # row-wise sum so a path's value does not depend on how rows are chunked
        velocity = np.sum(scaled * kl_basis_derivative(dimension, horizon, t)[:, 0], axis=1)
        return model.signal_drift(x, t) - 0.5 * vol * model.signal_vol_deriv(x, t) + vol * velocity

    def integrate(scaled: np.ndarray) -> np.ndarray:
        x = np.full(scaled.shape[0], model.x0)
        out = np.empty((scaled.shape[0], times.size))
        out[:, 0] = x
        for k in range(times.size - 1):
            h = (times[k + 1] - times[k]) / substeps
            for j in range(substeps):
                t = times[k] + j * h
                k1 = field(x, t, scaled)
                k2 = field(x + 0.5 * h * k1, t + 0.5 * h, scaled)
                k3 = field(x + 0.5 * h * k2, t + 0.5 * h, scaled)
                k4 = field(x + h * k3, t + h, scaled)
                x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[:, k + 1] = x
        return out

    chunks = np.array_split(codebook.scaled_coordinates, max(1, workers or 1))
    with np.errstate(over="ignore", invalid="ignore"):
        paths = np.vstack(parallel_map(integrate, chunks, workers))
    return raise_if_not_finite(paths, path_axis=0)


@dataclass(frozen=True)
class MarginalQuantization:
    """Sorted per-step grids of the Brownian codebook and of the quantized signal, with their weights.

    Index 0 holds the singletons {0} and {x0}. Transition matrices are computed on demand.
    """

    times: np.ndarray
    brownian_grids: tuple[np.ndarray, ...]
    signal_grids: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]

    @property
    def m(self) -> int:
        return len(self.brownian_grids) - 1

    @property
    def size(self) -> int:
        return self.brownian_grids[-1].size

    @property
    def support(self) -> np.ndarray:
        """Signal grid at the observation horizon t_m."""
        return self.signal_grids[-1]

    def transition(self, k: int) -> np.ndarray:
        """p̂_k[i, j]: Gaussian mass of the χ-cell j at t_k seen from the level χ^i at t_{k-1}.

        :param int k: 1 <= k <= m
        :return np.ndarray: row-stochastic matrix
        """
        if not 1 <= k <= self.m:
            raise InvalidParameterError(f"Transition index must lie in [1, {self.m}], got {k=}")
        previous = self.brownian_grids[k - 1][:, None]
        edges = _voronoi_edges(self.brownian_grids[k])
        scale = math.sqrt(self.times[k] - self.times[k - 1])
        return gaussian_cell_mass((edges[:-1][None, :] - previous) / scale, (edges[1:][None, :] - previous) / scale)

    def iter_transitions(self) -> Iterator[tuple[int, np.ndarray]]:
        for k in range(1, self.m + 1):
            yield k, self.transition(k)


def marginal_quantization(codebook: BrownianCodebook, signal_paths: np.ndarray) -> MarginalQuantization:
    """Sorts the codebook marginals at each t_k and carries the signal values along the same permutation.

    Equal Brownian values are separated by a path-index perturbation of 1e-12 before sorting.

    :param BrownianCodebook codebook:
    :param np.ndarray signal_paths: quantized diffusion on the same rows, shape (d_N, m+1)
    :raises DegenerateGridError: values still tie after the perturbation
    :return MarginalQuantization:
    """
    if signal_paths.shape != codebook.paths.shape:
        raise InvalidParameterError(f"Signal paths {signal_paths.shape} do not match codebook {codebook.paths.shape}")

    perturbation = np.arange(codebook.size) * TIE_BREAK
    brownian_grids, signal_grids, weights = [np.zeros(1)], [signal_paths[:1, 0].copy()], [np.ones(1)]
    for k in range(1, codebook.times.size):
        values = codebook.paths[:, k] + perturbation
        order = np.argsort(values, kind="stable")
        ordered = values[order]
        if np.any(np.diff(ordered) <= 0):
            raise DegenerateGridError(f"Brownian marginal at t_{k} has tied values after perturbation")
        brownian_grids.append(ordered)
        signal_grids.append(signal_paths[order, k])
        weights.append(codebook.weights[order])

    return MarginalQuantization(codebook.times, tuple(brownian_grids), tuple(signal_grids), tuple(weights))


@with_module_context("quantization")
@timed
def build_marginal_quantization(
    model: DiffusionModel, grid: TimeGrid, budget: int, workers: int | None = None
) -> MarginalQuantization:
    """Allocation, codebook, quantized diffusion and marginal grids on the observation part of `grid`.

    :param DiffusionModel model:
    :param TimeGrid grid: only t_0..t_m are used
    :param int budget: N
    :param int | None workers:
    :return MarginalQuantization:
    """
    grid = grid.observation_grid()
    quantizer = ProductQuantizer.optimal(budget, grid.s)
    logger.info(f"Product quantizer sizes={quantizer.sizes} d_N={quantizer.size} for N={budget}")
    codebook = brownian_codebook(quantizer, grid)
    signal_paths = quantized_diffusion_codebook(model, codebook, workers=workers)
    return marginal_quantization(codebook, signal_paths)
