from __future__ import annotations

import enum
from collections.abc import Mapping

from hitting_filter.exceptions import ConfigError
from hitting_filter.filtering import Kernel
from hitting_filter.models import DiffusionModel, Scheme, gbm_model, ou_model


def lookup_preset(s: Preset | str) -> Preset:
    if isinstance(s, Preset):
        return s
    if isinstance(s, str):
        if Preset.has_code(s.upper()):
            return Preset[s.upper()]

        for preset in Preset:
            if preset.value == s.lower():
                return preset

    raise ValueError(f"Invalid model preset, got {s=}")


def lookup_scenario(s: Scenario | str) -> Scenario:
    if isinstance(s, Scenario):
        return s
    if isinstance(s, str):
        code = s.lower()
        for scenario in Scenario:
            if scenario.value == code or scenario.preset.value == code:
                return scenario
        if s.upper().replace("-", "_") in Scenario.__members__:
            return Scenario[s.upper().replace("-", "_")]

    raise ValueError(f"Invalid scenario, got {s=}")


class Preset(enum.Enum):
    """ENUM containing 4 things about a model family: CODE, Meaning, required parameters, optional defaults."""

    def __new__(cls, *args, **kwds):
        obj = object.__new__(cls)
        obj._value_ = args[0]
        return obj

    def __init__(self, _: str, meaning: str, required: tuple[str, ...], optional: tuple[str, ...]):
        self._meaning = meaning
        self._required = required
        self._optional = optional

    def __str__(self):
        return self.value

    @property
    def meaning(self):
        return self._meaning

    @property
    def required(self) -> tuple[str, ...]:
        return self._required

    @property
    def optional(self) -> tuple[str, ...]:
        return self._optional

    @property
    def parameter_names(self) -> tuple[str, ...]:
        return self._required + self._optional

    @classmethod
    def has_code(cls, code: str) -> bool:
        return code in cls.__members__

    def build(self, params: Mapping[str, float], x0: float, y0: float) -> DiffusionModel:
        """Builds the model from its parameter map; unknown or missing names raise ConfigError."""
        missing = [name for name in self.required if name not in params]
        unknown = [name for name in params if name not in self.parameter_names]
        errors = {name: "missing model parameter" for name in missing} | {
            name: f"not a parameter of the {self.value} preset" for name in unknown
        }
        if errors:
            raise ConfigError(errors)
        factory = gbm_model if self is Preset.GBM else ou_model
        return factory(**{name: float(value) for name, value in params.items()}, x0=x0, y0=y0)

    # fmt: off
    GBM = "gbm", "Black-Scholes signal with a lognormal observation", ("mu", "sigma", "delta"), ("r", "nu")
    OU =  "ou",  "Ornstein-Uhlenbeck signal and observation",          ("lam", "theta", "sigma", "delta"), ()
    # fmt: on


class Scenario(enum.Enum):
    """Named run bundles of the two credit scenarios; every value can be overridden per key."""

    def __new__(cls, *args, **kwds):
        obj = object.__new__(cls)
        obj._value_ = args[0]
        return obj

    def __init__(self, _: str, preset: Preset, settings: dict):
        self._preset = preset
        self._settings = settings

    def __str__(self):
        return self.value

    @property
    def preset(self) -> Preset:
        return self._preset

    @property
    def settings(self) -> dict:
        """Copy of the bundle: model parameters under "params", run settings at top level."""
        return {key: dict(value) if isinstance(value, dict) else value for key, value in self._settings.items()}

    GBM_FIG1 = "gbm-fig1", Preset.GBM, {
        "params": {"mu": 0.03, "sigma": 0.03, "delta": 0.1},
        "x0": 86.3,
        "y0": 86.3,
        "barrier": 76.0,
        "t_m": 1.0,
        "m": 50,
        "horizons": "1.1:0.1:11",
        "steps": 50,
        "N": 1_000,
        "M": 100_000,
        "kernel": Kernel.LOGNORMAL.value,
        "scheme": Scheme.EXACT.value,
    }
    OU_FIG3 = "ou-fig3", Preset.OU, {
        "params": {"lam": 0.18, "theta": 0.35, "sigma": 0.12, "delta": 0.16},
        "x0": 0.35,
        "y0": 0.35,
        "barrier": 0.2,
        "t_m": 1.0,
        "m": 50,
        "horizons": "1.1:0.1:6",
        "steps": 50,
        "N": 1_000,
        "M": 100_000,
        "kernel": Kernel.GAUSSIAN.value,
        "scheme": Scheme.EXACT.value,
    }
