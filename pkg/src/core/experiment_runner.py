from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence
import csv
import io
import json
import logging
import math
import os
import uuid

import numpy as np

from src.core.classifier import load_checkpoint, predict_proba
from src.core.datagen import (
    DiscreteTaskSpec,
    GaussianMixtureSpec,
    gen_discrete_task,
    gen_gaussian_mixture,
    gen_grouped_mixture,
    gmm_posterior,
    load_csv,
    load_ecd1,
    load_idx,
    random_discrete_task,
)
from src.core.metrics import derive_seed, format_mean_std, mean_std
from src.core.worker_pool import WorkerPool
from src.models.cell_result import CellResult
from src.models.dataset import LabeledDataset
from src.models.errors import ConfigError
from src.models.experiment_cell import ExperimentCell
from src.models.experiment_config import TaskConfig
from src.models.schemas import validate_report

logger = logging.getLogger(__name__)

ProbModel = Callable[[np.ndarray], np.ndarray]


class RunStatus(Enum):
    """Status of an experiment run."""
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    CANCELLED = "cancelled"


# ----------------------------------------------------------------------------
# Task loading
# ----------------------------------------------------------------------------

@dataclass
class TaskData:
    """A loaded dataset plus whatever exact oracle its generator provides."""

    ds: LabeledDataset
    test_ds: Optional[LabeledDataset] = None
    mixture: Optional[GaussianMixtureSpec] = None
    discrete: Optional[DiscreteTaskSpec] = None
    group_of: Optional[np.ndarray] = None


def load_task(task: TaskConfig) -> TaskData:
    """
    Materialize the configured task.

    Generators are seeded by ``task.seed`` so repeated runs see identical data.
    """
    if task.source == "gaussian_mixture":
        spec = GaussianMixtureSpec.random(task.K, task.dim, task.separation, task.seed, var=task.var)
        return TaskData(ds=gen_gaussian_mixture(spec, task.n, derive_seed(task.seed, 1)), mixture=spec)
    if task.source == "grouped_mixture":
        ds, spec, group_of = gen_grouped_mixture(task.K, task.G, task.dim, task.seed, task.n,
                                                 within_sep=task.separation, var=task.var)
        return TaskData(ds=ds, mixture=spec, group_of=group_of)
    if task.source == "discrete":
        spec = random_discrete_task(task.support, task.K, task.seed, task.concentration, G=task.G)
        return TaskData(ds=gen_discrete_task(spec, task.n, derive_seed(task.seed, 1)), discrete=spec)
    if task.source == "idx":
        ds = load_idx(Path(task.images_path), Path(task.labels_path))
        test_ds = None
        if task.test_images_path and task.test_labels_path:
            test_ds = load_idx(Path(task.test_images_path), Path(task.test_labels_path))
        return TaskData(ds=ds, test_ds=test_ds)
    if task.source == "csv":
        return TaskData(ds=load_csv(Path(task.path)))
    return TaskData(ds=load_ecd1(Path(task.path)))


def probability_model(data: TaskData, checkpoint: Optional[str] = None) -> ProbModel:
    """
    The classifier whose probabilities feed the scores.

    A checkpoint wins when given; otherwise generated tasks use their exact
    posterior.
    """
    if checkpoint:
        store = load_checkpoint(Path(checkpoint))
        return lambda features: predict_proba(store, features)
    if data.mixture is not None:
        spec = data.mixture
        return lambda features: gmm_posterior(spec, features)
    if data.discrete is not None:
        conditional = data.discrete.conditional
        return lambda features: conditional[np.argmax(features, axis=1)]
    raise ConfigError("File-backed tasks need a trained model: set 'checkpoint' in the config")


# ----------------------------------------------------------------------------
# Output helpers
# ----------------------------------------------------------------------------

def to_jsonable(value: Any) -> Any:
    """Plain JSON types; infinities become the string "inf", NaN becomes null."""
    if hasattr(value, "to_dict"):
        value = value.to_dict()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Enum):
        return value.value
    return value


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def atomic_write_json(path: Path, data: Any) -> None:
    atomic_write_text(path, json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n")


def write_table(path: Path, rows: Sequence[dict]) -> None:
    """Write plot-ready rows as CSV; columns follow the first row's key order."""
    if not rows:
        atomic_write_text(path, "")
        return
    columns = list(rows[0].keys())
    for row in rows[1:]:
        columns += [k for k in row if k not in columns]
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: to_jsonable(row.get(k, "")) for k in columns})
    atomic_write_text(path, buffer.getvalue())


def aggregate(values: Sequence[dict], keys: Sequence[str], digits: int = 2) -> dict:
    """Mean, std and the ``mean_{±std}`` string of each metric across cells."""
    summary = {}
    for key in keys:
        column = [v[key] for v in values if v.get(key) is not None]
        if not column:
            continue
        mean, std = mean_std(column)
        summary[key] = {"mean": mean, "std": std, "formatted": format_mean_std(column, digits),
                        "count": len(column)}
    return summary


# ----------------------------------------------------------------------------
# Runs
# ----------------------------------------------------------------------------

@dataclass
class ExperimentRun:
    """One command invocation over a grid of (seed, alpha) cells."""

    id: str
    command: str
    output_dir: Path
    cells: list[ExperimentCell] = field(default_factory=list)
    status: RunStatus = RunStatus.QUEUED
    results: list[CellResult] = field(default_factory=list)

    @property
    def successful(self) -> int:
        return sum(1 for r in self.results if r.success)

    @property
    def failed(self) -> int:
        return sum(1 for r in self.results if not r.success)

    @property
    def progress_percentage(self) -> float:
        if not self.cells:
            return 0.0
        return len(self.results) / len(self.cells) * 100

    @property
    def is_complete(self) -> bool:
        return self.status in (RunStatus.COMPLETED, RunStatus.FAILED, RunStatus.CANCELLED)

    def values(self) -> list[Any]:
        """Values of successful cells, in cell order."""
        return [r.value for r in self.results if r.success]

    def get_summary(self) -> str:
        return (
            f"Run: {self.command} ({self.id})\n"
            f"Status: {self.status.value}\n"
            f"Cells: {len(self.results)}/{len(self.cells)} ({self.progress_percentage:.1f}%)\n"
            f"Successful: {self.successful}\n"
            f"Failed: {self.failed}"
        )


class ExperimentRunner:
    """Expands configs into cells, runs them on the worker pool and writes outputs."""

    def __init__(self, pool: Optional[WorkerPool] = None):
        self.pool = pool or WorkerPool()
        self.runs: list[ExperimentRun] = []

    def create_run(self, command: str, output_dir: Path, seeds: Sequence[int],
                   alphas: Optional[Sequence[float]] = None, **params) -> ExperimentRun:
        """
        Create a run whose cells are the seed list crossed with the alpha list.

        Args:
            command: CLI command name
            output_dir: Directory receiving report.json, table.csv and cells/
            seeds: Split seeds
            alphas: Miscoverage levels (None for alpha-free commands)
            **params: Extra parameters copied into every cell
        """
        cells = [
            ExperimentCell(seed=int(seed), alpha=alpha, params=dict(params))
            for seed in seeds
            for alpha in (alphas if alphas is not None else [None])
        ]
        run = ExperimentRun(id=uuid.uuid4().hex[:12], command=command, output_dir=Path(output_dir), cells=cells)
        self.runs.append(run)
        logger.info(f"Created {command} run {run.id} with {len(cells)} cells -> {output_dir}")
        return run

    def execute(self, run: ExperimentRun, fn: Callable[[ExperimentCell], Any],
                result_callback: Optional[Callable[[CellResult], None]] = None) -> list[CellResult]:
        """
        Run every cell and write each successful cell to cells/<name>.json.

        Failed cells are logged and kept in ``run.results``; they do not stop the run.
        """
        run.status = RunStatus.RUNNING
        cell_dir = run.output_dir / "cells"

        def on_result(result: CellResult) -> None:
            run.results.append(result)
            if result.success:
                atomic_write_json(cell_dir / f"{result.cell.name}.json",
                                  {"cell": result.cell.to_dict(), "value": result.value})
            else:
                logger.error(f"{run.command} cell {result.cell.name} failed: {result.error}")
            if result_callback:
                result_callback(result)

        try:
            results = self.pool.run_cells(run.cells, fn, on_result)
        except Exception:
            run.status = RunStatus.FAILED
            raise
        run.status = RunStatus.COMPLETED if run.successful else RunStatus.FAILED
        logger.info(f"Run {run.id} finished: {run.successful} successful, {run.failed} failed")
        return results

    def write_report(self, run: ExperimentRun, report: dict) -> Path:
        """Validate and atomically write report.json."""
        report = to_jsonable(report)
        validate_report(run.command, report)
        path = run.output_dir / "report.json"
        atomic_write_json(path, report)
        logger.info(f"Wrote {path}")
        return path

    def write_table(self, run: ExperimentRun, rows: Sequence[dict]) -> Path:
        path = run.output_dir / "table.csv"
        write_table(path, rows)
        return path

    def get_total_stats(self) -> dict:
        return {
            'total_runs': len(self.runs),
            'completed_runs': sum(1 for r in self.runs if r.is_complete),
            **self.pool.stats.get_stats(),
        }
