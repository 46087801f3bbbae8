import importlib.metadata

from hitting_filter.filtering import FilterState, Kernel, KernelNormalization, filter_recursion
from hitting_filter.models import DiffusionModel, PathPair, Scheme, TimeGrid, gbm_model, ou_model, simulate_pair
from hitting_filter.oracle import OracleEstimate, particle_conditional_survival
from hitting_filter.presets import Preset, Scenario
from hitting_filter.quantization import MarginalQuantization, build_marginal_quantization
from hitting_filter.survival import Budgets, SurvivalCurve, survival_curve

__all__ = [
    "Budgets",
    "DiffusionModel",
    "FilterState",
    "Kernel",
    "KernelNormalization",
    "MarginalQuantization",
    "OracleEstimate",
    "PathPair",
    "Preset",
    "Scenario",
    "Scheme",
    "SurvivalCurve",
    "TimeGrid",
    "build_marginal_quantization",
    "filter_recursion",
    "gbm_model",
    "ou_model",
    "particle_conditional_survival",
    "simulate_pair",
    "survival_curve",
]
__version__ = importlib.metadata.version("hitting-filter")
