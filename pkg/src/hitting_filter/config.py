from __future__ import annotations

import dataclasses
import logging
import tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from hitting_filter.exceptions import ConfigError, HittingFilterError
from hitting_filter.filtering import Kernel, KernelNormalization
from hitting_filter.models import Scheme
from hitting_filter.parsers import parse_horizons
from hitting_filter.presets import Preset, Scenario, lookup_preset, lookup_scenario

logger = logging.getLogger(__name__)

DELTA_SWEEP = (0.1, 0.3, 0.5)


@dataclass(frozen=True)
class RunConfig:
    preset: Preset
    params: dict[str, float]
    x0: float
    y0: float
    barrier: float
    t_m: float
    m: int
    horizons: tuple[float, ...]
    steps: int
    N: int
    M: int
    kernel: Kernel
    scheme: Scheme = Scheme.EULER
    normalization: KernelNormalization = KernelNormalization.DENSITY_RATIO
    seed: int = 0
    observations: Path | None = None
    out: Path = Path("out")
    cache: Path | None = None
    validate_oracle: bool = False
    particles: int = 20_000
    inner: int = 1
    force_mc_fbar: bool = False
    delta_sweep: bool = False
    weight_floor: float = 0.0
    workers: int | None = None
    scenario: str | None = field(default=None, compare=False)

    def validate(self) -> dict[str, str]:
        """Field-level messages; empty when the configuration is usable."""
        errors = {}
        for name in ("m", "steps", "N", "M", "particles", "inner"):
            if getattr(self, name) < 1:
                errors[name] = f"must be >= 1, got {getattr(self, name)}"
        if self.workers is not None and self.workers < 1:
            errors["workers"] = f"must be >= 1, got {self.workers}"
        if not self.t_m > 0:
            errors["t_m"] = f"must be positive, got {self.t_m}"
        if not self.barrier < self.x0:
            errors["barrier"] = f"must lie below x0={self.x0}, got {self.barrier}"
        if not self.horizons or min(self.horizons) <= self.t_m:
            errors["horizons"] = f"must all exceed t_m={self.t_m}"
        if self.seed < 0 or self.seed >= 2**64:
            errors["seed"] = f"must be an unsigned 64-bit integer, got {self.seed}"
        if self.weight_floor < 0:
            errors["weight_floor"] = f"must be >= 0, got {self.weight_floor}"
        if self.kernel is Kernel.LOGNORMAL and self.preset is not Preset.GBM:
            errors["kernel"] = "lognormal kernel requires the gbm preset"
        if self.delta_sweep and "delta" not in self.preset.parameter_names:
            errors["delta_sweep"] = f"the {self.preset} preset has no delta parameter"
        if self.observations is not None and not self.observations.is_file():
            errors["observations"] = f"no such file {self.observations}"
        return errors

    def to_dict(self) -> dict[str, Any]:
        """Plain values only, suitable for the JSON sidecar and for reloading as TOML keys."""
        values = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (Preset, Kernel, Scheme, KernelNormalization)):
                value = value.value
            elif isinstance(value, Path):
                value = str(value)
            elif isinstance(value, tuple):
                value = list(value)
            values[f.name] = value
        return values


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}
_ENUMS = {"kernel": Kernel, "scheme": Scheme, "normalization": KernelNormalization}
_ALIASES = {"validate": "validate_oracle", "a": "barrier", "s": "t_m"}


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Reads a flat TOML file.

    :raises ConfigError: unreadable file or invalid TOML
    """
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError({"config": f"could not read {path}: {e}"}) from e


def build_config(scenario: Scenario | str | None = None, *layers: dict[str, Any]) -> RunConfig:
    """Merges the scenario bundle with each layer in turn; later layers win.

    Keys are RunConfig field names or model parameter names. A layer may name a different scenario or preset with
    the "scenario" / "preset" keys.

    :raises ConfigError: unknown keys or invalid values, with one message per field
    """
    merged: dict[str, Any] = {}
    for layer in layers:
        merged |= {_ALIASES.get(key, key): value for key, value in layer.items() if value is not None}

    try:
        scenario = lookup_scenario(merged.pop("scenario", None) or scenario or "gbm-fig1")
    except ValueError as e:
        raise ConfigError({"scenario": str(e)}) from e
    settings = scenario.settings
    params = settings.pop("params")
    preset = scenario.preset
    if "preset" in merged:
        try:
            preset = lookup_preset(merged.pop("preset"))
        except ValueError as e:
            raise ConfigError({"preset": str(e)}) from e
        if preset is not scenario.preset:
            params = {}
    params |= dict(merged.pop("params", None) or {})

    errors = {}
    for key in list(merged):
        if key in preset.parameter_names:
            params[key] = merged.pop(key)
        elif key not in _FIELD_NAMES:
            errors[key] = "unknown configuration key"
    if errors:
        raise ConfigError(errors)

    values = settings | merged
    try:
        values["horizons"] = tuple(float(h) for h in parse_horizons(values["horizons"]))
        for key, enum_type in _ENUMS.items():
            if key in values:
                values[key] = enum_type(str(values[key]).lower())
        for key in ("observations", "out", "cache"):
            if values.get(key) is not None:
                values[key] = Path(values[key])
        config = RunConfig(preset=preset, params=params, scenario=scenario.value, **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError({"config": str(e)}) from e

    errors = config.validate()
    try:
        config.preset.build(config.params, config.x0, config.y0).validate(config.barrier, max(config.horizons))
    except ConfigError as e:
        errors |= e.errors
    except HittingFilterError as e:
        errors["params"] = str(e)
    if errors:
        raise ConfigError(errors)

    logger.debug(f"Resolved configuration {config.to_dict()}")
    return config