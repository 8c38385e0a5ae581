from dataclasses import dataclass, asdict, field, fields
from pathlib import Path
from typing import Any, Optional
import json

from src.models.errors import ConfigError
from src.models.score_spec import ScoreSpec
from src.models.train_config import FederatedConfig, TrainConfig

TASK_SOURCES = ("gaussian_mixture", "grouped_mixture", "discrete", "idx", "csv", "ecd1")
BOUND_METHODS = ("dpi", "dpi_exact", "mb_fano", "simple_fano", "conftr", "list_fano")


def _build(cls, data: Any, section: str):
    """Instantiate a dataclass section, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {unknown}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' section: {e}") from e


@dataclass
class TaskConfig:
    """Where the data comes from: a seeded generator or files on disk."""

    source: str = "gaussian_mixture"
    n: int = 2000
    K: int = 10
    dim: int = 10
    separation: float = 2.0
    var: float = 1.0
    G: int = 0
    support: int = 8
    concentration: float = 1.0
    seed: int = 0
    # File-backed sources
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    path: Optional[str] = None
    test_images_path: Optional[str] = None
    test_labels_path: Optional[str] = None

    def __post_init__(self):
        if self.source not in TASK_SOURCES:
            raise ConfigError(f"task.source must be one of {TASK_SOURCES}, got {self.source!r}")
        if self.source in ("gaussian_mixture", "grouped_mixture", "discrete"):
            if self.n < 2 or self.K < 1 or self.dim < 1:
                raise ConfigError(f"Invalid generator sizes n={self.n}, K={self.K}, dim={self.dim}")
        if self.source == "grouped_mixture" and (self.G < 1 or self.K % self.G):
            raise ConfigError(f"grouped_mixture needs G >= 1 dividing K, got K={self.K}, G={self.G}")
        if self.source == "idx" and not (self.images_path and self.labels_path):
            raise ConfigError("task.source 'idx' requires images_path and labels_path")
        if self.source in ("csv", "ecd1") and not self.path:
            raise ConfigError(f"task.source '{self.source}' requires path")


@dataclass
class SideInfoConfig:
    availability: list[float] = field(default_factory=lambda: [0.0, 0.3, 1.0])
    mondrian: bool = False
    epochs: int = 20
    lr: float = 0.1

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.availability):
            raise ConfigError(f"side_info.availability entries must lie in [0, 1], got {self.availability}")


@dataclass
class SetSizeConfig:
    clusters: int = 100
    iters: int = 100
    alphas: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1, 0.2])


@dataclass
class ExperimentConfig:
    """One experiment, loaded from a single JSON document."""

    task: TaskConfig = field(default_factory=TaskConfig)
    score: ScoreSpec = field(default_factory=ScoreSpec)
    scores: list[str] = field(default_factory=list)  # extra score kinds for evaluate
    alphas: list[float] = field(default_factory=lambda: [0.1])
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    cal_fraction: float = 0.5
    bounds: list[str] = field(default_factory=lambda: list(BOUND_METHODS))
    delta: float = 0.05
    hidden: list[int] = field(default_factory=list)
    training: TrainConfig = field(default_factory=TrainConfig)
    federated: FederatedConfig = field(default_factory=FederatedConfig)
    side_info: SideInfoConfig = field(default_factory=SideInfoConfig)
    setsize: SetSizeConfig = field(default_factory=SetSizeConfig)
    checkpoint: Optional[str] = None
    output: str = "runs/latest"
    log_level: str = "INFO"

    def __post_init__(self):
        self.task = _build(TaskConfig, self.task, "task")
        if isinstance(self.score, dict):
            try:
                self.score = ScoreSpec.from_dict(self.score)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Invalid 'score' section: {e}") from e
        self.training = _build(TrainConfig, self.training, "training")
        if isinstance(self.federated, dict):
            data = dict(self.federated)
            if isinstance(data.get("base"), dict):
                data["base"] = _build(TrainConfig, data["base"], "federated.base")
            self.federated = _build(FederatedConfig, data, "federated")
        self.side_info = _build(SideInfoConfig, self.side_info, "side_info")
        self.setsize = _build(SetSizeConfig, self.setsize, "setsize")
        self.validate()

    def validate(self) -> None:
        """Check cross-field constraints; raises ConfigError."""
        if not self.alphas or any(not 0.0 < a < 1.0 for a in self.alphas):
            raise ConfigError(f"alphas must be a nonempty list in (0, 1), got {self.alphas}")
        if not self.seeds or any(int(s) < 0 for s in self.seeds):
            raise ConfigError(f"seeds must be a nonempty list of nonnegative integers, got {self.seeds}")
        if not 0.0 < self.cal_fraction < 1.0:
            raise ConfigError(f"cal_fraction must lie in (0, 1), got {self.cal_fraction}")
        unknown = sorted(set(self.bounds) - set(BOUND_METHODS))
        if unknown:
            raise ConfigError(f"Unknown bound methods {unknown}; expected a subset of {BOUND_METHODS}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden layer sizes must be positive, got {self.hidden}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("Config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown top-level config keys: {unknown}")
        try:
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid config: {e}") from e

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        """Load and validate a config file."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def override(self, **flags) -> "ExperimentConfig":
        """Return a copy with top-level fields replaced; None values are ignored."""
        data = self.to_dict()
        for key, value in flags.items():
            if value is None:
                continue
            if key not in data:
                raise ConfigError(f"Cannot override unknown field {key!r}")
            data[key] = value
        return ExperimentConfig.from_dict(data)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)

    def to_dict(self) -> dict:
        """Convert config to a JSON-ready dictionary."""
        return {
            "task": asdict(self.task),
            "score": self.score.to_dict(),
            "scores": list(self.scores),
            "alphas": list(self.alphas),
            "seeds": [int(s) for s in self.seeds],
            "cal_fraction": self.cal_fraction,
            "bounds": list(self.bounds),
            "delta": self.delta,
            "hidden": list(self.hidden),
            "training": self.training.to_dict(),
            "federated": self.federated.to_dict(),
            "side_info": asdict(self.side_info),
            "setsize": asdict(self.setsize),
            "checkpoint": self.checkpoint,
            "output": self.output,
            "log_level": self.log_level,
        }
