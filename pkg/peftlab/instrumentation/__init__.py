"""Timing and memory profiling helpers."""

from peftlab.instrumentation.profiling import ProfileBlock, log_execution_time, timed

__all__ = ["ProfileBlock", "log_execution_time", "timed"]
