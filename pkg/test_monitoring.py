"""
Tests for the training log, timing/caching manager and error handling utilities
"""

import pytest

from modules.error_handler import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    CheckpointError,
    ConfigError,
    ErrorHandler,
    ShapeError,
    TrainingDivergedError,
)
from modules.monitoring import MonitoringManager, read_training_log
from modules.performance import PerformanceManager


def test_training_log_records(tmp_path):
    path = tmp_path / "logs" / "run.log.jsonl"
    with MonitoringManager(path) as monitor:
        monitor.log_step(1, 0.5)
        monitor.log_step(2, 0.4, val_loss=0.45)
        monitor.log_step(3, 0.3, val_loss=0.5)
        summary = monitor.summary()

    records = read_training_log(path)
    assert [r["iter"] for r in records] == [1, 2, 3]
    assert "val_loss" not in records[0]
    assert records[1]["val_loss"] == 0.45
    assert all(r["wall_ms"] >= 0 for r in records)
    assert records[2]["wall_ms"] >= records[0]["wall_ms"]
    assert summary["best_val_loss"] == 0.45
    assert summary["validations"] == 2
    assert summary["logged_steps"] == 3


def test_in_memory_monitor():
    monitor = MonitoringManager()
    monitor.log_step(1, 1.0)
    assert monitor.records[0]["train_loss"] == 1.0
    snapshot = monitor.log_system_metrics(1)
    assert {"rss_mb", "cpu_percent", "memory_percent", "threads"} <= set(snapshot)
    monitor.close()


def test_missing_training_log(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_training_log(tmp_path / "absent.jsonl")


def test_cache_evicts_least_recently_used():
    manager = PerformanceManager(max_entries=2)
    manager.cache_result("a", 1)
    manager.cache_result("b", 2)
    assert manager.get_cached_result("a") == 1
    manager.cache_result("c", 3)
    assert manager.get_cached_result("b") is None
    assert manager.get_cached_result("a") == 1
    metrics = manager.get_performance_metrics()
    assert metrics["evictions"] == 1
    assert metrics["cache_size"] == 2


def test_measure_time_records_and_reraises():
    manager = PerformanceManager(slow_threshold=1e9)

    @manager.measure_time("double")
    def double(x):
        return 2 * x

    @manager.measure_time("broken")
    def broken():
        raise ShapeError("bad")

    assert double(4) == 8
    assert manager.last_timing("double") >= 0.0
    with pytest.raises(ShapeError):
        broken()
    assert manager.last_timing("broken") is None
    assert manager.get_performance_metrics()["timings"]["double"]["calls"] == 1


@pytest.mark.parametrize("error,code", [
    (ConfigError("x"), EXIT_USAGE),
    (FileNotFoundError("x"), EXIT_USAGE),
    (ShapeError("x"), EXIT_RUNTIME),
    (CheckpointError("x"), EXIT_RUNTIME),
    (TrainingDivergedError(3, 1e-4, 42, float("nan")), EXIT_RUNTIME),
])
def test_exit_codes(error, code):
    assert ErrorHandler.exit_code_for(error) == code
    assert ErrorHandler.handle_command_error(error, "train") == code
    assert code != EXIT_OK


def test_diverged_error_carries_context():
    error = TrainingDivergedError(17, 1e-4, 99, float("inf"))
    assert error.iteration == 17
    assert error.batch_seed == 99
    assert "iteration 17" in str(error)


def test_safe_execute_swallows_errors():
    assert ErrorHandler.safe_execute(lambda: 1 / 0) is None
    assert ErrorHandler.safe_execute(max, 1, 2) == 2
