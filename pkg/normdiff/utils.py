import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Iterator, List, Optional, Sequence, TypeVar, Union

import numpy as np

from normdiff.errors import RunLockedError

# Create logger for the normdiff package
normdiff_logger = logging.getLogger('normdiff')

T = TypeVar('T')
R = TypeVar('R')

LOCK_FILE = ".lock"


def configure_logging(level=logging.INFO, enable_stdout=True, log_file=None):
    """
    Configure the normdiff logger with a standardized format and handlers.

    Args:
        level: The logging level to use. Default is logging.INFO.
        enable_stdout: Whether to log to stdout. Default is True.
        log_file: Optional file path to write logs to.

    Returns:
        The configured logger instance.
    """
    # Clear any existing handlers to avoid duplicate logs
    if normdiff_logger.handlers:
        for handler in list(normdiff_logger.handlers):
            handler.close()
        normdiff_logger.handlers.clear()

    normdiff_logger.setLevel(level)

    formatter = logging.Formatter(
        '[%(asctime)s] [%(levelname)s] [%(name)s:%(module)s] [%(process)d:%(thread)d] - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    if enable_stdout:
        stdout_handler = logging.StreamHandler(sys.stdout)
        stdout_handler.setFormatter(formatter)
        normdiff_logger.addHandler(stdout_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        normdiff_logger.addHandler(file_handler)

    return normdiff_logger


# Configure the logger with default settings
configure_logging()


def log_stage_transition(from_stage, to_stage, run_id, success=True, error=None):
    """
    Log a pipeline stage transition with relevant details.

    Args:
        from_stage: The stage the run is leaving.
        to_stage: The stage the run is entering.
        run_id: Identifier of the run (usually the run directory name).
        success: Whether the transition was successful. Default is True.
        error: Error information if the transition failed. Default is None.
    """
    if success:
        normdiff_logger.info(
            f"Stage transition: {from_stage} → {to_stage} | Run: {run_id}"
        )
    else:
        normdiff_logger.error(
            f"Stage transition failed: {from_stage} → {to_stage} | Run: {run_id} | Error: {error}"
        )


def log_stage_operation(operation, run_id, details=None):
    """
    Log general run operations such as writing artifacts or acquiring locks.

    Args:
        operation: The operation being performed (e.g., 'write', 'lock').
        run_id: Identifier of the run.
        details: Optional additional details about the operation.
    """
    message = f"Run {operation} | Run: {run_id}"
    if details:
        message += f" | Details: {details}"

    normdiff_logger.info(message)


def log_training_epoch(epoch, mean_loss, start_time=None):
    """
    Log the mean loss of a finished training epoch, optionally with duration.

    Args:
        epoch: Zero-based epoch index.
        mean_loss: Mean noise-prediction loss over the epoch.
        start_time: Optional datetime when the epoch started.
    """
    message = f"Training epoch {epoch} | Loss: {mean_loss:.6f}"

    if start_time:
        duration = (datetime.now() - start_time).total_seconds()
        message += f" | Duration: {duration:.2f}s"

    normdiff_logger.info(message)


def timed():
    """
    Decorator for timing functions and logging their execution time.

    Returns:
        A decorator that logs the execution time of the decorated function at DEBUG.
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                duration = time.perf_counter() - start_time
                normdiff_logger.debug(
                    f"Function '{func.__name__}' took {duration:.4f} seconds to execute"
                )
        return wrapper
    return decorator


def spawn_rngs(seed: Union[int, Sequence[int]], n: int) -> List[np.random.Generator]:
    """
    Derive ``n`` independent RNG streams from a master seed.

    The i-th stream depends only on (seed, i), so work split into chunks or
    cells draws the same numbers whatever the worker count.
    """
    root = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in root.spawn(n)]


def parallel_map(
    func: Callable[[T], R],
    items: Sequence[T],
    max_workers: Optional[int] = None,
) -> List[R]:
    """
    Map a CPU-bound function over items, in a process pool when asked to.

    Args:
        func: A picklable callable.
        items: Inputs, each passed to ``func``.
        max_workers: Worker processes. ``None`` or 1 runs serially in-process.

    Returns:
        Results in input order.
    """
    if not max_workers or max_workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(func, items))


@contextmanager
def run_lock(run_dir: Union[str, Path]) -> Iterator[Path]:
    """
    Hold exclusive ownership of a run directory for the duration of the block.

    Raises:
        RunLockedError: If another process already holds the lock.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"Run directory {run_dir} is locked by {lock_path}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        log_stage_operation(operation="lock", run_id=run_dir.name, details=str(lock_path))
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays nested in dicts/lists into plain Python."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value
