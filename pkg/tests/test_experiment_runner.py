"""Tests for run bookkeeping, output writers and task loading."""

import csv
import json
import math

import numpy as np
import pytest

from src.core.datagen import save_ecd1
from src.core.experiment_runner import (
    ExperimentRunner,
    RunStatus,
    aggregate,
    atomic_write_json,
    load_task,
    probability_model,
    to_jsonable,
    write_table,
)
from src.core.worker_pool import WorkerPool
from src.models.errors import ConfigError
from src.models.experiment_config import TaskConfig
from src.models.score_spec import ScoreKind


class TestJsonOutput:

    def test_special_floats(self):
        data = {"a": math.inf, "b": -math.inf, "c": float("nan"), "d": np.float64(0.5)}
        assert to_jsonable(data) == {"a": "inf", "b": "-inf", "c": None, "d": 0.5}

    def test_numpy_and_enums(self):
        out = to_jsonable({"arr": np.array([1, 2]), "flag": np.bool_(True), "kind": ScoreKind.APS, 3: (1, 2)})
        assert out == {"arr": [1, 2], "flag": True, "kind": "APS", "3": [1, 2]}
        assert isinstance(out["arr"][0], int)

    def test_atomic_write_is_sorted_and_stable(self, tmp_path):
        path = tmp_path / "out" / "report.json"
        atomic_write_json(path, {"b": 1, "a": math.inf})
        first = path.read_bytes()
        atomic_write_json(path, {"a": math.inf, "b": 1})
        assert path.read_bytes() == first
        assert json.loads(first) == {"a": "inf", "b": 1}
        assert not (tmp_path / "out" / "report.json.tmp").exists()


class TestTable:

    def test_columns_union_in_first_seen_order(self, tmp_path):
        path = tmp_path / "table.csv"
        write_table(path, [{"alpha": 0.1, "value": 1.5}, {"alpha": 0.2, "extra": math.inf}])
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0].keys()) == ["alpha", "value", "extra"]
        assert rows[1]["extra"] == "inf" and rows[1]["value"] == ""

    def test_empty_table(self, tmp_path):
        write_table(tmp_path / "t.csv", [])
        assert (tmp_path / "t.csv").read_text() == ""


class TestAggregate:

    def test_mean_std_and_missing_values(self):
        summary = aggregate([{"x": 1.0, "y": None}, {"x": 3.0, "y": None}], ["x", "y"])
        assert summary["x"]["mean"] == pytest.approx(2.0)
        assert summary["x"]["count"] == 2
        assert "y" not in summary


class TestExperimentRunner:

    def test_cells_cross_seeds_and_alphas(self, tmp_path):
        runner = ExperimentRunner(WorkerPool(max_workers=1))
        run = runner.create_run("evaluate", tmp_path, seeds=[0, 1], alphas=[0.1, 0.2], score="APS")
        assert [c.name for c in run.cells] == ["seed0_alpha0.1", "seed0_alpha0.2",
                                               "seed1_alpha0.1", "seed1_alpha0.2"]
        assert run.cells[0].params == {"score": "APS"}

    def test_execute_writes_cell_files(self, tmp_path):
        runner = ExperimentRunner(WorkerPool(max_workers=2))
        run = runner.create_run("bounds", tmp_path, seeds=[0, 1, 2])

        def fn(cell):
            if cell.seed == 1:
                raise ValueError("bad seed")
            return {"value": cell.seed * 0.5}

        results = runner.execute(run, fn)
        assert [r.success for r in results] == [True, False, True]
        assert run.status is RunStatus.COMPLETED
        assert run.values() == [{"value": 0.0}, {"value": 1.0}]
        saved = json.loads((tmp_path / "cells" / "seed2.json").read_text())
        assert saved["value"] == {"value": 1.0}
        assert not (tmp_path / "cells" / "seed1.json").exists()

    def test_all_cells_failing(self, tmp_path):
        runner = ExperimentRunner(WorkerPool(max_workers=1))
        run = runner.create_run("bounds", tmp_path, seeds=[0])
        runner.execute(run, lambda cell: 1 / 0)
        assert run.status is RunStatus.FAILED
        assert run.failed == 1

    def test_report_is_validated(self, tmp_path):
        runner = ExperimentRunner(WorkerPool(max_workers=1))
        run = runner.create_run("repro", tmp_path, seeds=[0])
        with pytest.raises(ValueError):
            runner.write_report(run, {"command": "repro", "config": {}})
        path = runner.write_report(run, {"command": "repro", "config": {}, "criterion": "all",
                                         "passed": True, "measured": {"x": math.inf}})
        assert json.loads(path.read_text())["measured"] == {"x": "inf"}


class TestTaskLoading:

    def test_generated_tasks_are_reproducible(self):
        task = TaskConfig(source="gaussian_mixture", n=50, K=3, dim=2, seed=4)
        a, b = load_task(task), load_task(task)
        np.testing.assert_array_equal(a.ds.features, b.ds.features)
        probs = probability_model(a)(a.ds.features)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_discrete_task_oracle(self):
        data = load_task(TaskConfig(source="discrete", n=30, K=3, support=4, seed=1))
        probs = probability_model(data)(data.ds.features)
        np.testing.assert_allclose(probs, data.discrete.conditional[np.argmax(data.ds.features, axis=1)])

    def test_file_task_needs_checkpoint(self, tmp_path, tiny_ds):
        save_ecd1(tiny_ds, tmp_path / "data.ecd1")
        data = load_task(TaskConfig(source="ecd1", path=str(tmp_path / "data.ecd1")))
        assert data.ds.n == tiny_ds.n
        with pytest.raises(ConfigError):
            probability_model(data)
