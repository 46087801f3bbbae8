import math
import re

import numpy as np

from hitting_filter.exceptions import ConfigError

_RANGE = re.compile(r"^\s*(?P<start>[-+\d.eE]+)\s*:\s*(?P<step>[-+\d.eE]+)\s*:\s*(?P<stop>[-+\d.eE]+)\s*$")


def parse_horizons(horizons: str | list[float] | tuple[float, ...]) -> np.ndarray:
    """Parse a horizon string into an increasing array of times.

    :param str | list[float] horizons: "start:step:stop" (stop included), a comma list "2,5,10" or a sequence
    :raises ConfigError:
    :return np.ndarray:
    """
    if isinstance(horizons, str):
        match = _RANGE.match(horizons)
        try:
            if match is not None:
                start, step, stop = (float(match.group(name)) for name in ("start", "step", "stop"))
                if step <= 0 or stop < start:
                    raise ConfigError({"horizons": f"Empty range '{horizons}'"})
                count = math.floor((stop - start) / step + 1e-9) + 1
                values = np.round(start + step * np.arange(count), 12)
            else:
                values = np.array([float(part) for part in horizons.split(",") if part.strip()])
        except ValueError as e:
            raise ConfigError(
                {"horizons": f"Could not parse '{horizons}'. Examples of valid strings: '1.1:0.1:11', '2,5,10'"}
            ) from e
    else:
        values = np.asarray(horizons, dtype=float)

    if values.ndim != 1 or values.size == 0:
        raise ConfigError({"horizons": "At least one horizon is required"})
    if np.any(np.diff(values) <= 0):
        raise ConfigError({"horizons": "Horizons must be strictly increasing"})
    return values
