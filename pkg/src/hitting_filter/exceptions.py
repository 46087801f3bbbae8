import numpy as np


class HittingFilterError(Exception):
    pass


class ConfigError(HittingFilterError):
    def __init__(self, errors: dict[str, str] | str):
        if isinstance(errors, str):
            errors = {"config": errors}
        self.errors = errors
        super().__init__("; ".join(f"{field}: {message}" for field, message in errors.items()))


class InvalidParameterError(HittingFilterError, ValueError):
    pass


class ShapeError(HittingFilterError, ValueError):
    pass


class InvalidModelError(HittingFilterError):
    pass


class CacheError(HittingFilterError):
    pass


class NumericalError(HittingFilterError):
    pass


class SimulationDivergedError(NumericalError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Simulation produced a non-finite value at step {step}.")


class SolverError(NumericalError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual={residual:.3e})")


class DegenerateGridError(NumericalError):
    pass


class QuantizationDivergedError(NumericalError):
    def __init__(self, path_index: int):
        self.path_index = path_index
        super().__init__(f"Quantized diffusion produced a non-finite value on codebook path {path_index}.")


class FilterDegenerateError(NumericalError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"All observation likelihoods vanished at filter step {step}.")


def raise_if_not_finite(values: np.ndarray, *, step: int | None = None, path_axis: int | None = None) -> np.ndarray:
    """Raises the right divergence error if `values` holds a non-finite entry.

    :param np.ndarray values: freshly computed state values
    :param int | None step: time index being filled, reported by `SimulationDivergedError`
    :param int | None path_axis: axis indexing codebook paths, reported by `QuantizationDivergedError`
    :raises QuantizationDivergedError: when `path_axis` is given
    :raises SimulationDivergedError: otherwise
    :return np.ndarray: `values` unchanged
    """
    finite = np.isfinite(values)
    if finite.all():
        return values

    if path_axis is not None:
        bad = np.moveaxis(~finite, path_axis, 0).reshape(finite.shape[path_axis], -1).any(axis=1)
        raise QuantizationDivergedError(int(np.flatnonzero(bad)[0]))
    raise SimulationDivergedError(-1 if step is None else step)
