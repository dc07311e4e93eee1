"""
Timing Decorators and Profiling Blocks
======================================
Wall-clock and tensor-memory profiling for training and evaluation.

Features:
- ``timed`` decorator logging durations at DEBUG when settings.debug is on
  (resolved once per run through ``configure_debug``)
- ``log_execution_time`` decorator that always logs
- ``ProfileBlock`` context manager measuring elapsed seconds and the tensor
  allocator's high-water mark inside the block (PSCP time and memory inputs)

Usage:
    from peftlab.instrumentation.profiling import ProfileBlock, timed

    with ProfileBlock("evaluate:test") as block:
        run_decoding()
    block.elapsed, block.peak_bytes

    @timed("train_step")
    def train_step(...):
        ...
"""

import logging
import time
from functools import wraps
from typing import Callable, Optional

from peftlab.core import numcore as nc

logger = logging.getLogger(__name__)

_debug: Optional[bool] = None


def configure_debug(enabled: Optional[bool] = None) -> bool:
    """
    Resolve the debug flag once; ``None`` reads it from the settings.

    Runs call this once at their start.
    """
    global _debug
    if enabled is None:
        from peftlab.config import get_settings

        enabled = get_settings().debug
    _debug = bool(enabled)
    return _debug


def _debug_enabled() -> bool:
    return configure_debug() if _debug is None else _debug


# ============================================================================
# TIMING DECORATORS
# ============================================================================


def timed(operation_name: str):
    """
    Decorator to time function execution when debug mode is enabled.

    Args:
        operation_name: Name for timing entry

    Example:
        @timed("evaluate_split")
        def evaluate_split(...):
            ...
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            if not _debug_enabled():
                return func(*args, **kwargs)

            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                duration_ms = round((time.perf_counter() - start) * 1000, 2)
                logger.error(f"{operation_name} failed after {duration_ms}ms: {e}")
                raise
            duration_ms = round((time.perf_counter() - start) * 1000, 2)
            logger.debug(f"{operation_name} completed in {duration_ms}ms")
            return result

        return wrapper

    return decorator


def log_execution_time(func: Callable) -> Callable:
    """
    Simple timing decorator that always logs (no debug check).

    Example:
        @log_execution_time
        def run_benchmark():
            ...
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        result = func(*args, **kwargs)
        duration = time.perf_counter() - start
        logger.info(f"{func.__name__} took {duration:.3f}s")
        return result

    return wrapper


# ============================================================================
# PROFILING CONTEXT MANAGER
# ============================================================================


class ProfileBlock:
    """
    Context manager measuring a code block.

    ``elapsed`` is wall time in seconds. ``peak_bytes`` is the allocator's
    high-water mark of live tensor bytes reached inside the block.
    """

    def __init__(self, name: str):
        self.name = name
        self.start_time: Optional[float] = None
        self.elapsed: float = 0.0
        self.peak_bytes: int = 0

    def __enter__(self):
        nc.allocation_stats().reset_peak()
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time is not None:
            self.elapsed = time.perf_counter() - self.start_time
            self.peak_bytes = nc.allocation_stats().peak_bytes
            if _debug_enabled():
                logger.debug(
                    f"Block '{self.name}' took {round(self.elapsed * 1000, 2)}ms, "
                    f"peak {self.peak_bytes} tensor bytes"
                )
        return False
