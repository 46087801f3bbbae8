from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import narwhals as nw
import numpy as np

from hitting_filter.cache import QuantizationCache
from hitting_filter.config import DELTA_SWEEP, RunConfig, build_config, load_config_file
from hitting_filter.exceptions import ConfigError, HittingFilterError, NumericalError
from hitting_filter.filtering import load_observations
from hitting_filter.models import DiffusionModel, TimeGrid, simulate_pair
from hitting_filter.oracle import particle_conditional_survival
from hitting_filter.quantization import MarginalQuantization, build_marginal_quantization
from hitting_filter.schemas import SIMULATED_OBSERVATIONS_SCHEMA, VALIDATION_SCHEMA
from hitting_filter.survival import Budgets, SurvivalCurve, survival_curve
from hitting_filter.utils import rng_streams

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

STREAMS = ("observations", "fbar", "oracle")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hitting-filter",
        description="Conditional survival probabilities of a hidden diffusion given noisy discrete observations.",
    )
    parser.add_argument("--config", type=Path, help="flat TOML file of run settings and model parameters")
    parser.add_argument("--preset", help="scenario bundle: gbm-fig1, ou-fig3 (or gbm, ou)")
    parser.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--observations", type=Path, help="CSV of (t_k, y_k) instead of simulated observations")
    parser.add_argument("--validate", action="store_true", default=None, help="compare with the particle oracle")
    parser.add_argument("--force-mc-fbar", action="store_true", default=None, help="Monte Carlo F̄ for gbm too")
    parser.add_argument("--delta-sweep", action="store_true", default=None, help="rerun for delta in 0.1, 0.3, 0.5")
    parser.add_argument("--cache", type=Path, help="directory of cached quantizations")
    parser.add_argument("--workers", type=int, help="worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "seed": args.seed,
        "out": args.out,
        "observations": args.observations,
        "validate_oracle": args.validate,
        "force_mc_fbar": args.force_mc_fbar,
        "delta_sweep": args.delta_sweep,
        "cache": args.cache,
        "workers": args.workers,
    }


def write_observations(path: Path, grid: TimeGrid, obs: np.ndarray, signal: np.ndarray) -> None:
    data = {"t_k": grid.times[: grid.m + 1], "y_k": obs, "x_k": signal[: grid.m + 1]}
    nw.from_dict(data, SIMULATED_OBSERVATIONS_SCHEMA, backend="polars").write_csv(str(path))


def _observations(config: RunConfig, model: DiffusionModel, grid: TimeGrid, out: Path | None) -> np.ndarray:
    if config.observations is not None:
        return load_observations(config.observations, grid)

    pair = simulate_pair(model, grid, rng_streams(config.seed, STREAMS)["observations"], config.scheme)
    if out is not None:
        write_observations(out, grid, pair.obs, pair.signal)
    return pair.obs


def _quantization(config: RunConfig, model: DiffusionModel, grid: TimeGrid) -> MarginalQuantization:
    def builder():
        return build_marginal_quantization(model, grid, config.N, config.workers)

    if config.cache is None:
        return builder()
    return QuantizationCache(config.cache).get_or_build(model, grid, config.N, builder)


def _curve(
    config: RunConfig, model: DiffusionModel, grid: TimeGrid, obs: np.ndarray, mq: MarginalQuantization
) -> SurvivalCurve:
    return survival_curve(
        model,
        obs,
        grid,
        config.barrier,
        config.horizons,
        Budgets(config.N, config.steps, config.M),
        config.kernel,
        rng_streams(config.seed, STREAMS)["fbar"],
        normalization=config.normalization,
        force_mc_fbar=config.force_mc_fbar,
        workers=config.workers,
        weight_floor=config.weight_floor,
        quantization=mq,
        seed=config.seed,
    )


def _validate(config: RunConfig, model: DiffusionModel, grid: TimeGrid, obs: np.ndarray, curve: SurvivalCurve):
    estimate = particle_conditional_survival(
        model,
        obs,
        grid,
        config.barrier,
        curve.horizons,
        config.particles,
        rng_streams(config.seed, STREAMS)["oracle"],
        inner=config.inner,
        steps=config.steps,
        kernel=config.kernel,
        normalization=config.normalization,
        force_mc_fbar=config.force_mc_fbar,
        workers=config.workers,
    )
    diff = np.abs(curve.probabilities - estimate.probabilities)
    data = {
        "t_n": curve.horizons,
        "filter": curve.probabilities,
        "oracle": estimate.probabilities,
        "oracle_std_err": estimate.std_errors,
        "abs_diff": diff,
    }
    nw.from_dict(data, VALIDATION_SCHEMA, backend="polars").write_csv(str(config.out / "validation.csv"))

    print(f"{'t_n':>8} {'filter':>10} {'oracle':>10} {'|diff|':>10}")
    for t_n, p_filter, p_oracle, d in zip(curve.horizons, curve.probabilities, estimate.probabilities, diff):
        print(f"{t_n:8.3f} {p_filter:10.6f} {p_oracle:10.6f} {d:10.6f}")
    print(f"max |filter - oracle| = {diff.max():.6f} (oracle ESS {estimate.ess:.0f})")
    if estimate.warning:
        print(f"warning: {estimate.warning}")


def run(config: RunConfig) -> int:
    """Produces every artifact of one configuration in `config.out`.

    :param RunConfig config: validated configuration
    :return int: exit status
    """
    config.out.mkdir(parents=True, exist_ok=True)
    model = config.preset.build(config.params, config.x0, config.y0)
    grid = TimeGrid.uniform(config.t_m, config.m)
    logger.info(f"Running {config.scenario} ({config.preset}) with seed={config.seed} into {config.out}")

    obs = _observations(config, model, grid, config.out / "observations.csv")
    mq = _quantization(config, model, grid)
    curve = _curve(config, model, grid, obs, mq)
    curve.write_csv(config.out / "survival.csv")
    curve.write_sidecar(config.out / "survival.json", config.to_dict())
    logger.info(f"Wrote {curve.horizons.size} horizons to {config.out / 'survival.csv'}")

    if config.validate_oracle:
        _validate(config, model, grid, obs, curve)

    if config.delta_sweep:
        for delta in DELTA_SWEEP:
            swept = model.with_params(delta=delta)
            # the signal quantization does not depend on delta; the seed fixes the W and W~ increments
            swept_obs = obs if config.observations is not None else _observations(config, swept, grid, None)
            swept_curve = _curve(config, swept, grid, swept_obs, mq)
            swept_curve.write_csv(config.out / f"survival_delta_{delta}.csv")
            last = swept_curve.probabilities[-1]
            logger.info(f"delta={delta}: survival at t_n={swept_curve.horizons[-1]} is {last:.6f}")

    return EXIT_OK


def _report(e: HittingFilterError) -> None:
    notes = "".join(f" ({note})" for note in getattr(e, "__notes__", ()))
    logger.error(f"{type(e).__name__}: {e}{notes}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        file_layer = load_config_file(args.config) if args.config is not None else {}
        config = build_config(None, file_layer, {"scenario": args.preset}, _overrides(args))
        return run(config)
    except ConfigError as e:
        for field, message in e.errors.items():
            logger.error(f"config {field}: {message}")
        return EXIT_CONFIG
    except NumericalError as e:
        _report(e)
        return EXIT_NUMERICAL
    except HittingFilterError as e:
        _report(e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
