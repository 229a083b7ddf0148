"""
Performance Module
Provides wall-time measurement and bounded result caching for the pipeline.
"""

import logging
import os
import threading
import time
from collections import OrderedDict
from functools import wraps
from typing import Any, Dict, Hashable, Optional

logger = logging.getLogger(__name__)


class PerformanceManager:
    """Centralized timing and caching"""

    def __init__(self, max_entries: int = 256, slow_threshold: Optional[float] = None):
        self.cache: "OrderedDict[Hashable, Any]" = OrderedDict()
        self.max_entries = max_entries
        self._lock = threading.Lock()
        self.performance_metrics = {
            "cache_hits": 0,
            "cache_misses": 0,
            "evictions": 0,
            "slow_calls": 0,
            "timings": {},
        }
        if slow_threshold is None:
            slow_threshold = float(os.getenv("P2S_SLOW_THRESHOLD_S", "30"))
        self.slow_threshold = slow_threshold  # seconds

    def cache_result(self, key: Hashable, value: Any) -> None:
        """Cache a result, evicting the least recently used entry when full"""
        with self._lock:
            self.cache[key] = value
            self.cache.move_to_end(key)
            while len(self.cache) > self.max_entries:
                self.cache.popitem(last=False)
                self.performance_metrics["evictions"] += 1

    def get_cached_result(self, key: Hashable) -> Optional[Any]:
        """Get a cached result if present"""
        with self._lock:
            if key in self.cache:
                self.cache.move_to_end(key)
                self.performance_metrics["cache_hits"] += 1
                return self.cache[key]
            self.performance_metrics["cache_misses"] += 1
            return None

    def measure_time(self, func_name: str):
        """Decorator to measure function execution time"""
        def decorator(func):
            @wraps(func)
            def wrapper(*args, **kwargs):
                start_time = time.perf_counter()
                try:
                    result = func(*args, **kwargs)
                except Exception as e:
                    execution_time = time.perf_counter() - start_time
                    logger.error(f"Error in {func_name} after {execution_time:.2f}s: {e}")
                    raise
                execution_time = time.perf_counter() - start_time
                self._record_timing(func_name, execution_time)
                if execution_time > self.slow_threshold:
                    self.performance_metrics["slow_calls"] += 1
                    logger.warning(f"Slow {func_name}: {execution_time:.2f}s")
                return result
            return wrapper
        return decorator

    def _record_timing(self, func_name: str, seconds: float) -> None:
        with self._lock:
            entry = self.performance_metrics["timings"].setdefault(
                func_name, {"calls": 0, "total_s": 0.0, "last_s": 0.0}
            )
            entry["calls"] += 1
            entry["total_s"] += seconds
            entry["last_s"] = seconds

    def last_timing(self, func_name: str) -> Optional[float]:
        entry = self.performance_metrics["timings"].get(func_name)
        return entry["last_s"] if entry else None

    def get_performance_metrics(self) -> Dict[str, Any]:
        """Get current performance metrics"""
        total_requests = self.performance_metrics["cache_hits"] + self.performance_metrics["cache_misses"]
        hit_rate = 0.0
        if total_requests > 0:
            hit_rate = self.performance_metrics["cache_hits"] / total_requests * 100
        return {
            "cache_size": len(self.cache),
            "cache_hit_rate": hit_rate,
            "evictions": self.performance_metrics["evictions"],
            "slow_calls": self.performance_metrics["slow_calls"],
            "timings": {k: dict(v) for k, v in self.performance_metrics["timings"].items()},
        }


performance = PerformanceManager()
