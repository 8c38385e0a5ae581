from dataclasses import dataclass, asdict, field
from enum import Enum
from typing import Optional

from src.models.errors import ConfigError, min_calibration_size


class Activation(Enum):
    RELU = "relu"
    TANH = "tanh"


class LossKind(Enum):
    """Training objectives."""
    CE = "CE"
    CONFTR = "CONFTR"
    CONFTR_CLASS = "CONFTR_CLASS"
    FANO = "FANO"
    MB_FANO = "MB_FANO"
    DPI = "DPI"

    @property
    def is_conformal(self) -> bool:
        return self is not LossKind.CE


class SwapKind(Enum):
    LOGISTIC = "logistic"
    CAUCHY = "cauchy"


@dataclass(frozen=True)
class RelaxConfig:
    """Sharpness of the sorting network and of soft set membership."""

    steepness: float = 10.0
    temperature: float = 0.1
    swap_kind: SwapKind = SwapKind.LOGISTIC

    def __post_init__(self):
        if not self.steepness > 0:
            raise ValueError(f"steepness must be positive, got {self.steepness}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not isinstance(self.swap_kind, SwapKind):
            object.__setattr__(self, "swap_kind", SwapKind(str(self.swap_kind).lower()))

    def to_dict(self) -> dict:
        return {"steepness": self.steepness, "temperature": self.temperature,
                "swap_kind": self.swap_kind.value}

    @classmethod
    def from_dict(cls, data: dict) -> "RelaxConfig":
        return cls(**data)


@dataclass(frozen=True)
class ModelSpec:
    """Layer sizes from input dim to K; no hidden sizes means a linear model."""

    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError(f"ModelSpec needs input and output sizes, got {self.layer_sizes}")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"Layer sizes must be positive, got {self.layer_sizes}")
        if not isinstance(self.activation, Activation):
            object.__setattr__(self, "activation", Activation(str(self.activation).lower()))

    @classmethod
    def linear(cls, dim: int, K: int) -> "ModelSpec":
        return cls(layer_sizes=(dim, K))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def K(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation.value}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(layer_sizes=tuple(data["layer_sizes"]),
                   activation=Activation(data.get("activation", "relu")))


@dataclass
class TrainConfig:
    """Conformal-training settings."""

    loss: LossKind = LossKind.CE
    alpha_train: float = 0.01
    batch_size: int = 500
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 50
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    class_weight: float = 1.0  # CONFTR_CLASS only
    delta: float = 0.05  # DPI only
    eval_alpha: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.loss, LossKind):
            self.loss = LossKind(str(self.loss).upper())
        if isinstance(self.relax, dict):
            self.relax = RelaxConfig.from_dict(self.relax)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.alpha_train < 0.5:
            raise ConfigError(f"alpha_train must lie in (0, 0.5), got {self.alpha_train}")
        if not 0.0 < self.eval_alpha < 1.0:
            raise ConfigError(f"eval_alpha must lie in (0, 1), got {self.eval_alpha}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"Invalid batch_size={self.batch_size} or epochs={self.epochs}")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"Invalid lr={self.lr} or momentum={self.momentum}")
        if self.class_weight < 0:
            raise ConfigError(f"class_weight must be nonnegative, got {self.class_weight}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if self.loss.is_conformal:
            needed = 2 * min_calibration_size(self.alpha_train)
            if self.batch_size < needed:
                raise ConfigError(
                    f"batch_size={self.batch_size} too small for alpha_train={self.alpha_train}: "
                    f"each half-batch needs {needed // 2} calibration points"
                )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["loss"] = self.loss.value
        data["relax"] = self.relax.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass
class FederatedConfig:
    """Simulated federated run: device count, label skew and rounds."""

    m: int = 10
    dirichlet_conc: float = 1.0
    rounds: int = 20
    local_epochs: int = 1
    base: TrainConfig = field(default_factory=TrainConfig)
    personalize_epochs: int = 5
    personalize_lr: Optional[float] = None  # defaults to 0.1 x base lr
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.base, dict):
            self.base = TrainConfig.from_dict(self.base)
        if self.m < 1:
            raise ConfigError(f"Device count m must be >= 1, got {self.m}")
        if not self.dirichlet_conc > 0:
            raise ConfigError(f"dirichlet_conc must be positive, got {self.dirichlet_conc}")
        if self.rounds < 0 or self.local_epochs < 0 or self.personalize_epochs < 0:
            raise ConfigError("rounds, local_epochs and personalize_epochs must be nonnegative")
        if self.personalize_lr is None:
            self.personalize_lr = 0.1 * self.base.lr

    def to_dict(self) -> dict:
        data = asdict(self)
        data["base"] = self.base.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "FederatedConfig":
        return cls(**data)
