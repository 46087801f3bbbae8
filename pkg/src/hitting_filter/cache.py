from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np

from hitting_filter.exceptions import CacheError
from hitting_filter.models import DiffusionModel, TimeGrid
from hitting_filter.quantization import MarginalQuantization

FORMAT_VERSION = 1


class QuantizationCache:
    def __init__(self, directory: str | Path) -> None:
        """Cache rooted at `directory`, created on first write.

        :param str | Path directory:
        """
        self.directory = Path(directory)
        self.logger = logging.getLogger(__name__)

    @staticmethod
    def key(model: DiffusionModel, grid: TimeGrid, budget: int) -> str | None:
        """SHA-256 of everything the quantization depends on; None for models without a preset tag."""
        if model.family is None:
            return None
        payload = {
            "version": FORMAT_VERSION,
            "family": model.family,
            "params": {name: float(value) for name, value in sorted(model.params.items())},
            "x0": float(model.x0),
            "times": [float(t) for t in grid.times[: grid.m + 1]],
            "budget": int(budget),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def path(self, key: str) -> Path:
        return self.directory / f"quantization-{key}.npz"

    def load(self, key: str) -> MarginalQuantization | None:
        """Reads a cached quantization; a missing, unreadable or outdated file gives None."""
        path = self.path(key)
        if not path.is_file():
            return None
        try:
            return self._read(path)
        except (CacheError, OSError, ValueError, KeyError) as e:
            self.logger.warning(f"Ignoring cache file {path}: {e}")
            return None

    @staticmethod
    def _read(path: Path) -> MarginalQuantization:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"])
            if version != FORMAT_VERSION:
                raise CacheError(f"format version {version} differs from {FORMAT_VERSION}")
            x0 = float(data["x0"])
            brownian, signal, weights = data["brownian"], data["signal"], data["weights"]
            times = data["times"]

        return MarginalQuantization(
            times,
            (np.zeros(1), *brownian),
            (np.array([x0]), *signal),
            (np.ones(1), *weights),
        )

    def save(self, key: str, mq: MarginalQuantization) -> Path:
        path = self.path(key)
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(
                f,
                version=np.array(FORMAT_VERSION),
                times=mq.times,
                x0=np.array(mq.signal_grids[0][0]),
                brownian=np.stack(mq.brownian_grids[1:]),
                signal=np.stack(mq.signal_grids[1:]),
                weights=np.stack(mq.weights[1:]),
            )
        self.logger.debug(f"Saved quantization to {path}")
        return path

    def get_or_build(
        self, model: DiffusionModel, grid: TimeGrid, budget: int, builder: Callable[[], MarginalQuantization]
    ) -> MarginalQuantization:
        key = self.key(model, grid, budget)
        if key is None:
            return builder()

        mq = self.load(key)
        if mq is not None:
            self.logger.info(f"Reusing cached quantization {self.path(key).name}")
            return mq

        mq = builder()
        self.save(key, mq)
        return mq
