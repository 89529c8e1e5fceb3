"""
Shared runtime pieces for rsd-kit: the exception hierarchy (each error
carries the process exit code the CLI reports) and a thread-bounded map.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


class RsdKitError(Exception):
    """Base class for every failure the CLI reports with a specific exit code."""

    exit_code = 1


class ConfigError(RsdKitError):
    """Invalid configuration or workflow spec."""

    exit_code = 2


class SplitError(RsdKitError):
    """Dataset split cannot be built (too few surgeries, drifted quartiles)."""

    exit_code = 2


class StatsError(RsdKitError):
    """Reference statistics cannot be computed from the training surgeries."""

    exit_code = 2


class InputError(RsdKitError):
    """Invalid argument to an estimator (e.g. unknown phase index)."""

    exit_code = 2


class ProtocolError(RsdKitError):
    """Evaluation protocol violated (e.g. overlapping E-sets across folds)."""

    exit_code = 2


class FormatError(RsdKitError):
    """Unreadable or foreign container file."""

    exit_code = 2


class PipelineOrderError(RsdKitError):
    """A stage was invoked before the stage it depends on produced its artifact."""

    exit_code = 3


class NumericError(RsdKitError):
    """Non-finite loss or gradient during training."""

    exit_code = 4


class DimensionError(RsdKitError, ValueError):
    """Operand shapes do not conform."""

    exit_code = 4


class CheckpointError(RsdKitError):
    """Checkpoint incompatible with the requested use."""

    exit_code = 4


def resolve_threads(threads: Optional[int] = None) -> int:
    """Thread bound: explicit value, else RSDKIT_THREADS, else 1."""
    if threads is None:
        env_value = os.getenv("RSDKIT_THREADS")
        if env_value:
            try:
                threads = int(env_value)
            except ValueError:
                logging.warning(f"Invalid integer value for RSDKIT_THREADS: {env_value}")
                threads = None
    return max(1, threads or 1)


def parallel_map(
    fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None
) -> List[R]:
    """Map fn over items with at most `threads` workers; results keep input order."""
    items = list(items)
    workers = min(resolve_threads(threads), max(1, len(items)))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
