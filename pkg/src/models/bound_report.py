from dataclasses import dataclass
from typing import Optional

import numpy as np

from src.models.dataset import as_set_matrix, check_prob_rows


@dataclass
class BoundReport:
    """One entropy-bound evaluation in nats with its additive breakdown."""

    method: str
    value: float
    terms: dict[str, float]
    alpha: float
    n: int
    delta: Optional[float] = None
    clip_events: int = 0

    def __post_init__(self):
        total = sum(self.terms.values())
        if abs(total - self.value) > 1e-9 * max(1.0, abs(self.value)):
            raise ValueError(f"Bound terms sum to {total}, not to value {self.value}")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "value": self.value,
            "terms": dict(self.terms),
            "alpha": self.alpha,
            "n": self.n,
            "delta": self.delta,
            "clip_events": self.clip_events,
        }

    def value_bits(self) -> float:
        return self.value / np.log(2.0)


@dataclass
class EvalBatch:
    """
    Evaluation sample for the entropy bounds.

    Rows of ``probs`` hold the model distribution Q(.|x_i), ``sets`` is the
    (n, K) boolean mask of hard prediction sets built from a calibration that
    did not see these examples. ``weights`` turns the batch into an exact
    population evaluation when given (normalized to sum to 1).
    """

    probs: np.ndarray
    labels: np.ndarray
    sets: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.probs = check_prob_rows(self.probs)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.sets = as_set_matrix(self.sets)
        n, K = self.probs.shape
        if len(self.labels) != n or self.sets.shape != (n, K):
            raise ValueError(
                f"Misaligned batch: probs {self.probs.shape}, labels {self.labels.shape}, "
                f"sets {self.sets.shape}"
            )
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != n or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative, one per example, with positive sum")
            self.weights = w / w.sum()

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    @property
    def covered(self) -> np.ndarray:
        return self.sets[np.arange(self.n), self.labels]

    @property
    def set_sizes(self) -> np.ndarray:
        return self.sets.sum(axis=1)

    def normalized_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights
