"""
Monitoring Module
Provides the JSON-lines training log and process/system metrics.
"""

import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import psutil

logger = logging.getLogger(__name__)


class MonitoringManager:
    """Training log writer and system metrics snapshots"""

    def __init__(self, log_path: Optional[Union[str, Path]] = None):
        self.log_path = Path(log_path) if log_path else None
        self._handle = None
        self.records: List[Dict[str, Any]] = []
        self.process = psutil.Process(os.getpid())
        self.start_time = time.perf_counter()
        self.metrics = {
            "logged_steps": 0,
            "validations": 0,
            "best_val_loss": None,
        }
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.log_path.open("w", encoding="utf-8")

    def __enter__(self) -> "MonitoringManager":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False

    def elapsed_ms(self) -> float:
        return (time.perf_counter() - self.start_time) * 1000.0

    def log_step(self, iteration: int, train_loss: float, val_loss: Optional[float] = None) -> Dict[str, Any]:
        """Append one {iter, train_loss, val_loss?, wall_ms} record"""
        record: Dict[str, Any] = {"iter": iteration, "train_loss": train_loss}
        if val_loss is not None:
            record["val_loss"] = val_loss
            self.metrics["validations"] += 1
            best = self.metrics["best_val_loss"]
            if best is None or val_loss < best:
                self.metrics["best_val_loss"] = val_loss
        record["wall_ms"] = round(self.elapsed_ms(), 3)
        self._write(record)
        self.metrics["logged_steps"] += 1
        return record

    def log_system_metrics(self, iteration: int) -> Dict[str, Any]:
        """Log and record a process/system snapshot"""
        snapshot = self.system_snapshot()
        logger.info(f"System metrics at iteration {iteration}: {json.dumps(snapshot)}")
        if snapshot["memory_percent"] > 90:
            logger.warning(f"High memory usage: {snapshot['memory_percent']:.1f}%")
        return snapshot

    def system_snapshot(self) -> Dict[str, Any]:
        try:
            memory = psutil.virtual_memory()
            return {
                "rss_mb": round(self.process.memory_info().rss / 2 ** 20, 1),
                "cpu_percent": self.process.cpu_percent(interval=None),
                "memory_percent": memory.percent,
                "threads": self.process.num_threads(),
            }
        except psutil.Error as e:
            logger.error(f"Error reading system metrics: {e}")
            return {"rss_mb": None, "cpu_percent": None, "memory_percent": 0.0, "threads": None}

    def summary(self) -> Dict[str, Any]:
        """Run summary for the final log line"""
        return {
            **self.metrics,
            "wall_s": round(self.elapsed_ms() / 1000.0, 3),
            "system": self.system_snapshot(),
        }

    def _write(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(record) + "\n")
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None


def read_training_log(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Training log not found: {path}")
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
