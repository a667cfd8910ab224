"""Metrics collection and logging for stuffnet.

Tracks:
- Training iterations (per-term losses, learning rate, step time)
- Evaluation summaries (mAP per size bin, segmentation IoU)
- Checkpoint and dataset I/O
- Error frequencies

Design Decision DD-018: Structured logging for observability. Log events go to
stderr so command output on stdout stays machine-readable.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from collections import defaultdict
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any

import structlog

logger = structlog.get_logger()


@dataclass
class IterationMetrics:
    """Loss terms of one training iteration."""

    iteration: int
    losses: dict[str, float]
    lr: float
    duration_ms: float
    timestamp: datetime = field(default_factory=datetime.now)


@dataclass
class EvalMetrics:
    """Summary of one evaluation run."""

    split: str
    size_bin: str
    mean_ap: float
    num_classes: int
    mean_iou: float | None = None
    timestamp: datetime = field(default_factory=datetime.now)


@dataclass
class IOMetrics:
    """Metrics for checkpoint and dataset reads/writes."""

    operation: str  # 'checkpoint_save', 'checkpoint_load', 'dataset_write', ...
    path: str
    items: int
    size_bytes: int | None = None
    timestamp: datetime = field(default_factory=datetime.now)


class MetricsCollector:
    """Centralized metrics collection.

    Example:
        >>> collector = MetricsCollector()
        >>> collector.record_iteration(0, {"total": 2.5}, lr=1e-3, duration_ms=12.0)
        >>> metrics = collector.export_metrics()
    """

    def __init__(self, enabled: bool = True, export_path: Path | None = None):
        """Initialize metrics collector.

        Args:
            enabled: Whether to collect metrics
            export_path: Optional path to export metrics JSON
        """
        self.enabled = enabled
        self.export_path = export_path

        self.iteration_metrics: list[IterationMetrics] = []
        self.eval_metrics: list[EvalMetrics] = []
        self.io_metrics: list[IOMetrics] = []

        self.counters: dict[str, int] = defaultdict(int)
        self.timers: dict[str, list[float]] = defaultdict(list)
        self.errors: list[dict[str, Any]] = []

    def record_iteration(
        self,
        iteration: int,
        losses: dict[str, float],
        lr: float,
        duration_ms: float,
    ) -> None:
        """Record the loss terms of one training step."""
        if not self.enabled:
            return

        self.iteration_metrics.append(
            IterationMetrics(
                iteration=iteration, losses=dict(losses), lr=lr, duration_ms=duration_ms
            )
        )
        self.counters["train_iterations"] += 1
        self.timers["train_step"].append(duration_ms)

    def record_eval(
        self,
        split: str,
        size_bin: str,
        mean_ap: float,
        num_classes: int,
        mean_iou: float | None = None,
    ) -> None:
        """Record an evaluation summary."""
        if not self.enabled:
            return

        self.eval_metrics.append(
            EvalMetrics(
                split=split,
                size_bin=size_bin,
                mean_ap=mean_ap,
                num_classes=num_classes,
                mean_iou=mean_iou,
            )
        )
        self.counters["evaluations"] += 1

        logger.info(
            "evaluation_completed",
            split=split,
            size_bin=size_bin,
            mean_ap=round(mean_ap, 4),
            mean_iou=None if mean_iou is None else round(mean_iou, 4),
        )

    def record_io(
        self,
        operation: str,
        path: str | Path,
        items: int,
        size_bytes: int | None = None,
    ) -> None:
        """Record a checkpoint or dataset operation."""
        if not self.enabled:
            return

        self.io_metrics.append(
            IOMetrics(operation=operation, path=str(path), items=items, size_bytes=size_bytes)
        )
        self.counters[operation] += 1

        logger.debug("io_operation", operation=operation, path=str(path), items=items)

    def record_error(
        self, module: str, error: Exception, context: dict[str, Any] | None = None
    ) -> None:
        """Record error for diagnostics."""
        if not self.enabled:
            return

        error_data = {
            "module": module,
            "error_type": type(error).__name__,
            "error_message": str(error),
            "context": context or {},
            "timestamp": datetime.now().isoformat(),
        }
        self.errors.append(error_data)
        self.counters[f"error_{module}"] += 1

        logger.error(
            "error_recorded",
            module=module,
            error_type=type(error).__name__,
            error_message=str(error),
        )

    @contextmanager
    def timer(self, operation: str) -> Iterator[None]:
        """Context manager for timing operations.

        Example:
            >>> with collector.timer("forward"):
            ...     pass
        """
        start = time.perf_counter()
        try:
            yield
        finally:
            duration_ms = (time.perf_counter() - start) * 1000
            self.timers[operation].append(duration_ms)

    def export_metrics(self) -> dict[str, Any]:
        """Export all metrics as dict.

        Returns:
            Dictionary with aggregated metrics
        """
        avg_durations = {
            key: sum(vals) / len(vals) if vals else 0.0 for key, vals in self.timers.items()
        }

        final_losses: dict[str, float] = {}
        if self.iteration_metrics:
            final_losses = dict(self.iteration_metrics[-1].losses)

        return {
            "summary": {
                "total_iterations": len(self.iteration_metrics),
                "total_evaluations": len(self.eval_metrics),
                "total_errors": len(self.errors),
                "final_losses": final_losses,
            },
            "evaluations": [
                {k: v for k, v in asdict(m).items() if k != "timestamp"}
                for m in self.eval_metrics
            ],
            "counters": dict(self.counters),
            "avg_durations_ms": avg_durations,
            "errors": self.errors,
        }

    def save_metrics(self, path: Path | None = None) -> None:
        """Save metrics to JSON file.

        Args:
            path: Output path (defaults to self.export_path)
        """
        output_path = path or self.export_path
        if not output_path:
            return

        metrics = self.export_metrics()
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)

        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(metrics, f, indent=2)

        logger.info("metrics_exported", path=str(output_path))

    def reset(self) -> None:
        """Reset all metrics."""
        self.iteration_metrics.clear()
        self.eval_metrics.clear()
        self.io_metrics.clear()
        self.counters.clear()
        self.timers.clear()
        self.errors.clear()


# Global metrics collector instance
_global_collector: MetricsCollector | None = None


def get_metrics_collector() -> MetricsCollector:
    """Get or create global metrics collector.

    Returns:
        Global MetricsCollector instance
    """
    global _global_collector
    if _global_collector is None:
        _global_collector = MetricsCollector()
    return _global_collector


def _stderr_logger_factory(*args: Any) -> structlog.PrintLogger:
    # Resolved per call so redirected streams (test runners) are honoured.
    return structlog.PrintLogger(file=sys.stderr)


def configure_logging(level: str = "INFO", structured: bool = True) -> None:
    """Configure structlog logging.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR)
        structured: Use structured JSON output
    """
    processors: list[structlog.types.Processor] = [
        structlog.contextvars.merge_contextvars,
        structlog.processors.add_log_level,
        structlog.processors.TimeStamper(fmt="iso"),
    ]

    if structured:
        processors.append(structlog.processors.JSONRenderer())
    else:
        processors.append(structlog.dev.ConsoleRenderer(colors=False))

    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(
            getattr(logging, level.upper(), logging.INFO)
        ),
        context_class=dict,
        logger_factory=_stderr_logger_factory,
        cache_logger_on_first_use=False,
    )
