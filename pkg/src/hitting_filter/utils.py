import logging
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from functools import wraps
from typing import TypeVar

import numpy as np

from hitting_filter.exceptions import HittingFilterError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def with_module_context(name: str):
    """Adds the pipeline stage `name` as a note on any library error raised by the wrapped call.

    :param str name: stage name shown to the user, e.g. "quantization"
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except HittingFilterError as e:
                note = f"while running {name}.{func.__name__}"
                if note not in getattr(e, "__notes__", ()):
                    e.add_note(note)
                raise

        return wrapper

    return decorator


def timed(func):
    """Logs the wall time of the wrapped call at DEBUG level."""

    @wraps(func)
    def timed_wrapper(*args, **kwargs):
        start = time.perf_counter()
        result = func(*args, **kwargs)
        logger.debug(f"{func.__qualname__} took {time.perf_counter() - start:.3f}s")
        return result

    return timed_wrapper


def rng_streams(seed: int, names: Sequence[str]) -> dict[str, np.random.Generator]:
    """Derives one independent counter-based stream per name from a master seed.

    The i-th name always receives the i-th child of the master `SeedSequence`, so a stream only depends on
    `seed` and on its position in `names`.

    :param int seed: master seed
    :param Sequence[str] names: stream names
    :return dict[str, np.random.Generator]:
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(names, children, strict=True)}


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """Order-preserving map over a thread pool; `workers` of 1 (or fewer) runs inline.

    :param Callable func:
    :param Iterable items:
    :param int | None workers: defaults to the executor's own choice
    :return list: results in input order
    """
    items = list(items)
    if workers is not None and workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))
