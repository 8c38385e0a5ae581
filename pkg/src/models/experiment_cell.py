from dataclasses import dataclass, field
from typing import Any, Optional


@dataclass(frozen=True)
class ExperimentCell:
    """One (seed, alpha) unit of an experiment grid."""

    seed: int
    alpha: Optional[float] = None
    params: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        """Validate cell parameters."""
        if self.seed < 0:
            raise ValueError(f"Seed must be nonnegative, got {self.seed}")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def name(self) -> str:
        """File-system friendly cell identifier."""
        if self.alpha is None:
            return f"seed{self.seed}"
        return f"seed{self.seed}_alpha{self.alpha:g}"

    def to_dict(self) -> dict:
        return {"seed": self.seed, "alpha": self.alpha, **self.params}
