"""Tests for config loading, validation and report schemas."""

import json

import pytest

from src.models.errors import ConfigError
from src.models.experiment_config import BOUND_METHODS, ExperimentConfig, TaskConfig
from src.models.schemas import REPORT_SCHEMAS, validate_report
from src.models.score_spec import ScoreKind
from src.models.train_config import LossKind


class TestExperimentConfig:

    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.alphas == [0.1]
        assert cfg.seeds == list(range(10))
        assert cfg.bounds == list(BOUND_METHODS)

    def test_nested_sections(self):
        cfg = ExperimentConfig.from_dict({
            "task": {"source": "discrete", "n": 100, "K": 3, "support": 4},
            "score": {"kind": "RAPS", "lambda_reg": 0.1, "k_reg": 1},
            "training": {"loss": "conftr", "batch_size": 200},
            "federated": {"m": 4, "base": {"lr": 0.2}},
        })
        assert cfg.task.source == "discrete"
        assert cfg.score.kind is ScoreKind.RAPS
        assert cfg.training.loss is LossKind.CONFTR
        assert cfg.federated.m == 4 and cfg.federated.base.lr == 0.2

    @pytest.mark.parametrize("data", [
        {"colour": "red"},
        {"task": {"sauce": 1}},
        {"training": {"momentun": 0.9}},
        {"side_info": {"availability": [1.5]}},
    ])
    def test_invalid_documents(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    @pytest.mark.parametrize("field,value", [
        ("alphas", [0.0]), ("alphas", []), ("seeds", [-1]), ("cal_fraction", 1.0),
        ("bounds", ["magic"]), ("delta", 0.0), ("hidden", [0]),
    ])
    def test_cross_field_validation(self, field, value):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({field: value})

    def test_load(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"alphas": [0.05, 0.1], "seeds": [3]}))
        cfg = ExperimentConfig.load(path)
        assert cfg.alphas == [0.05, 0.1] and cfg.seeds == [3]

    def test_load_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ExperimentConfig.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(bad)

    def test_override_ignores_none(self):
        cfg = ExperimentConfig().override(alphas=[0.2], seeds=None, output="runs/x")
        assert cfg.alphas == [0.2]
        assert cfg.seeds == list(range(10))
        assert cfg.output == "runs/x"
        with pytest.raises(ConfigError):
            ExperimentConfig().override(nonsense=1)

    def test_save_round_trip(self, tmp_path):
        cfg = ExperimentConfig.from_dict({"task": {"source": "grouped_mixture", "K": 6, "G": 3}})
        cfg.save(tmp_path / "cfg.json")
        assert ExperimentConfig.load(tmp_path / "cfg.json").to_dict() == cfg.to_dict()


class TestTaskConfig:

    def test_unknown_source(self):
        with pytest.raises(ConfigError):
            TaskConfig(source="parquet")

    def test_grouped_needs_dividing_groups(self):
        with pytest.raises(ConfigError):
            TaskConfig(source="grouped_mixture", K=10, G=3)

    @pytest.mark.parametrize("source", ["idx", "csv", "ecd1"])
    def test_file_sources_need_paths(self, source):
        with pytest.raises(ConfigError):
            TaskConfig(source=source)


class TestReportSchemas:

    def test_every_command_has_a_schema(self):
        assert set(REPORT_SCHEMAS) == {"gen-data", "calibrate", "evaluate", "bounds", "setsize",
                                       "train", "sideinfo", "fed-train", "repro"}

    def test_valid_report(self):
        validate_report("setsize", {"command": "setsize", "config": {}, "h_lb": "inf",
                                    "rows": [{"alpha": 0.1, "simple": 0.0, "model_based": 0.1,
                                              "max_size": 0.1}]})

    def test_missing_row_key(self):
        report = {"command": "calibrate", "config": {},
                  "calibrations": [{"seed": 0, "alpha": 0.1, "q_hat": 0.5}]}
        with pytest.raises(ValueError, match="'n'"):
            validate_report("calibrate", report)

    def test_boolean_is_not_a_number(self):
        with pytest.raises(ValueError):
            validate_report("setsize", {"command": "setsize", "config": {}, "h_lb": True, "rows": []})

    def test_unknown_command(self):
        with pytest.raises(ValueError):
            validate_report("plot", {})
