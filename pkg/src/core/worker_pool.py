from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Optional, Sequence
import threading
import logging
import os
import time

from src.models.cell_result import CellResult
from src.models.experiment_cell import ExperimentCell

logger = logging.getLogger(__name__)

THREADS_ENV = "ECP_THREADS"


def default_workers() -> int:
    """Worker count from ECP_THREADS, else min(32, cpu_count)."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        if value < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return value
    return min(32, os.cpu_count() or 4)


class WorkerPool:
    """
    Runs independent experiment cells on a thread pool.

    Results are always returned in cell order, so the output of a run does not
    depend on scheduling.
    """

    def __init__(self, max_workers: Optional[int] = None):
        """
        Initialize worker pool.

        Args:
            max_workers: Maximum number of worker threads (None = ECP_THREADS or auto-detect)
        """
        self.max_workers = max_workers if max_workers is not None else default_workers()
        if self.max_workers < 1:
            raise ValueError(f"max_workers must be >= 1, got {self.max_workers}")
        self.is_stopped = threading.Event()
        self.stats = WorkerPoolStats()

        logger.debug(f"WorkerPool initialized with {self.max_workers} workers")

    def run_cells(
        self,
        cells: Sequence[ExperimentCell],
        fn: Callable[[ExperimentCell], Any],
        result_callback: Optional[Callable[[CellResult], None]] = None
    ) -> list[CellResult]:
        """
        Run ``fn`` on every cell.

        A failing cell becomes a CellResult with success=False; it never
        aborts the other cells.

        Args:
            cells: Cells to run
            fn: Function computing one cell's value
            result_callback: Called with each result in cell order

        Returns:
            CellResults in the order of ``cells``
        """
        self.is_stopped.clear()
        cells = list(cells)
        if self.max_workers == 1 or len(cells) <= 1:
            results = [self._run_one(fn, cell) for cell in cells]
        else:
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                futures = [executor.submit(self._run_one, fn, cell) for cell in cells]
                results = [future.result() for future in futures]

        for result in results:
            self.stats.add_result(result)
            if result_callback:
                result_callback(result)
        return results

    def map_ordered(self, fn: Callable[[Any], Any], items: Sequence[Any]) -> list[Any]:
        """Apply ``fn`` to each item; results in item order, the first failure re-raised."""
        cells = [ExperimentCell(seed=i, params={"item": item}) for i, item in enumerate(items)]
        results = self.run_cells(cells, lambda cell: fn(cell.params["item"]))
        return [result.unwrap() for result in results]

    def _run_one(self, fn: Callable[[ExperimentCell], Any], cell: ExperimentCell) -> CellResult:
        """Run a single cell, capturing errors."""
        if self.is_stopped.is_set():
            return CellResult(success=False, cell=cell, error="Processing stopped by user")
        start = time.perf_counter()
        try:
            value = fn(cell)
        except Exception as e:
            logger.error(f"Cell {cell.name} failed: {e}")
            return CellResult(success=False, cell=cell, error=str(e), elapsed=time.perf_counter() - start)
        return CellResult(success=True, cell=cell, value=value, elapsed=time.perf_counter() - start)

    def stop(self) -> None:
        """
        Stop processing.
        Running cells finish; cells not yet started return a failed result.
        """
        logger.info("Stopping worker pool")
        self.is_stopped.set()


class WorkerPoolStats:
    """Track statistics for worker pool processing."""

    def __init__(self):
        self.total_processed = 0
        self.successful = 0
        self.failed = 0
        self.total_time = 0.0
        self.lock = threading.Lock()

    def add_result(self, result: CellResult) -> None:
        """Add a result to the statistics."""
        with self.lock:
            self.total_processed += 1
            if result.success:
                self.successful += 1
            else:
                self.failed += 1

            if result.elapsed:
                self.total_time += result.elapsed

    def get_stats(self) -> dict:
        """Get current statistics as a dictionary."""
        with self.lock:
            return {
                'total_processed': self.total_processed,
                'successful': self.successful,
                'failed': self.failed,
                'success_rate': f"{(self.successful / self.total_processed * 100):.1f}%" if self.total_processed > 0 else "0%",
                'total_time_seconds': self.total_time,
                'avg_time_per_cell': f"{(self.total_time / self.total_processed):.3f}s" if self.total_processed > 0 else "0s"
            }
