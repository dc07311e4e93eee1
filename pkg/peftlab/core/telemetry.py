"""
Prometheus Telemetry for Training Runs
======================================
Counters, gauges and histograms describing what the engine did.

Metrics Categories:
- Run metrics (count by command and status, duration)
- Training metrics (optimizer steps, last loss)
- Inference metrics (decode duration)
- Discovery metrics (plugin directories by outcome)

Integration:
- Call track_run() when a train/predict/bench command finishes
- Call track_train_step() from the optimizer loop
- Call track_discovery() for every plugin directory inspected
- write_metrics() dumps the text exposition next to run outputs
"""

import logging
from pathlib import Path
from typing import Optional

from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    generate_latest,
)

logger = logging.getLogger(__name__)

# ============================================================================
# METRICS REGISTRY
# ============================================================================

registry = CollectorRegistry()

# ============================================================================
# RUN METRICS
# ============================================================================

runs_total = Counter(
    "pf_runs_total",
    "Total engine runs",
    ["command", "status"],
    registry=registry,
)

run_duration_seconds = Histogram(
    "pf_run_duration_seconds",
    "Wall-clock duration of engine runs",
    ["command", "peft_type"],
    buckets=(0.5, 1.0, 5.0, 10.0, 30.0, 60.0, 300.0, 900.0),
    registry=registry,
)

# ============================================================================
# TRAINING METRICS
# ============================================================================

train_steps_total = Counter(
    "pf_train_steps_total",
    "Optimizer steps taken",
    ["peft_type"],
    registry=registry,
)

train_loss = Gauge(
    "pf_train_loss",
    "Most recent training loss",
    ["peft_type"],
    registry=registry,
)

trainable_parameters = Gauge(
    "pf_trainable_parameters",
    "Trainable parameter count of the active adapter",
    ["peft_type"],
    registry=registry,
)

# ============================================================================
# INFERENCE METRICS
# ============================================================================

inference_duration_seconds = Histogram(
    "pf_inference_duration_seconds",
    "Greedy decoding time per evaluated split",
    ["peft_type"],
    buckets=(0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 30.0),
    registry=registry,
)

# ============================================================================
# DISCOVERY METRICS
# ============================================================================

discovered_methods_total = Counter(
    "pf_discovered_methods_total",
    "Method directories inspected during discovery",
    ["origin", "outcome"],
    registry=registry,
)

# ============================================================================
# INSTRUMENTATION HELPERS
# ============================================================================


def track_run(command: str, status: str, duration: Optional[float] = None, peft_type: str = ""):
    """
    Track a finished engine run.

    Args:
        command: CLI command (train, predict, bench)
        status: Run status (success, failed)
        duration: Run duration in seconds
        peft_type: Method name of the run, if any
    """
    runs_total.labels(command=command, status=status).inc()
    if duration is not None:
        run_duration_seconds.labels(command=command, peft_type=peft_type).observe(duration)


def track_train_step(peft_type: str, loss: float):
    train_steps_total.labels(peft_type=peft_type).inc()
    train_loss.labels(peft_type=peft_type).set(loss)


def track_trainable(peft_type: str, count: int):
    trainable_parameters.labels(peft_type=peft_type).set(count)


def track_inference(peft_type: str, duration: float):
    inference_duration_seconds.labels(peft_type=peft_type).observe(duration)


def track_discovery(origin: str, outcome: str):
    """
    Track one inspected method directory.

    Args:
        origin: builtin or plugin
        outcome: registered, skipped, duplicate
    """
    discovered_methods_total.labels(origin=origin, outcome=outcome).inc()


# ============================================================================
# METRICS EXPORT
# ============================================================================


def get_metrics() -> bytes:
    """Current metrics in Prometheus text format."""
    return generate_latest(registry)


def write_metrics(output_dir: Path) -> Path:
    path = Path(output_dir) / "metrics.prom"
    path.write_bytes(get_metrics())
    logger.debug("Wrote telemetry to %s", path)
    return path
