"""Unit tests for metrics module."""

import json
import time

from stuffnet.metrics import MetricsCollector, get_metrics_collector


class TestMetricsCollector:
    """Tests for MetricsCollector."""

    def test_record_iteration(self):
        """Test iteration records feed the summary."""
        collector = MetricsCollector()
        collector.record_iteration(1, {"total": 2.5}, lr=1e-3, duration_ms=12.0)
        collector.record_iteration(2, {"total": 2.0}, lr=1e-3, duration_ms=10.0)

        metrics = collector.export_metrics()

        assert metrics["summary"]["total_iterations"] == 2
        assert metrics["summary"]["final_losses"] == {"total": 2.0}
        assert metrics["counters"]["train_iterations"] == 2
        assert metrics["avg_durations_ms"]["train_step"] == 11.0

    def test_record_eval(self):
        """Test evaluation summaries are exported without timestamps."""
        collector = MetricsCollector()
        collector.record_eval("test", "small", 0.25, num_classes=4, mean_iou=0.5)

        evaluation = collector.export_metrics()["evaluations"][0]

        assert evaluation == {
            "split": "test",
            "size_bin": "small",
            "mean_ap": 0.25,
            "num_classes": 4,
            "mean_iou": 0.5,
        }

    def test_record_io_and_error(self):
        """Test I/O counters and error records."""
        collector = MetricsCollector()
        collector.record_io("checkpoint_save", "/tmp/x.snck", items=12, size_bytes=100)
        collector.record_error("cli", ValueError("bad"), {"command": "train"})

        metrics = collector.export_metrics()

        assert metrics["counters"]["checkpoint_save"] == 1
        assert metrics["counters"]["error_cli"] == 1
        assert metrics["errors"][0]["error_type"] == "ValueError"
        assert metrics["errors"][0]["context"] == {"command": "train"}

    def test_disabled(self):
        """Test a disabled collector records nothing."""
        collector = MetricsCollector(enabled=False)
        collector.record_iteration(1, {"total": 1.0}, lr=0.1, duration_ms=1.0)
        collector.record_io("read_dataset", "x", 1)

        assert collector.export_metrics()["summary"]["total_iterations"] == 0
        assert collector.io_metrics == []

    def test_timer(self):
        """Test the timer context records a duration."""
        collector = MetricsCollector()
        with collector.timer("forward"):
            time.sleep(0.001)

        assert len(collector.timers["forward"]) == 1
        assert collector.timers["forward"][0] > 0

    def test_save_metrics(self, tmp_path):
        """Test metrics are written as JSON."""
        collector = MetricsCollector()
        collector.record_iteration(1, {"total": 1.0}, lr=0.1, duration_ms=1.0)
        path = tmp_path / "out" / "metrics.json"

        collector.save_metrics(path)

        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["summary"]["total_iterations"] == 1

    def test_save_without_path_is_noop(self, tmp_path):
        """Test save_metrics with no destination writes nothing."""
        MetricsCollector().save_metrics()

        assert list(tmp_path.iterdir()) == []

    def test_reset(self):
        """Test reset clears all records."""
        collector = MetricsCollector()
        collector.record_iteration(1, {"total": 1.0}, lr=0.1, duration_ms=1.0)
        collector.reset()

        assert collector.iteration_metrics == []
        assert dict(collector.counters) == {}


class TestGlobalCollector:
    """Tests for the global accessor."""

    def test_singleton(self):
        """Test the accessor returns one instance."""
        assert get_metrics_collector() is get_metrics_collector()
