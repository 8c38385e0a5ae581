from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Marker for examples whose side information is not observed
MISSING_SIDE_INFO = -1


@dataclass
class LabeledDataset:
    """
    Feature matrix with dense integer labels and optional group ids.

    Side information is stored per example; ``MISSING_SIDE_INFO`` marks
    examples without an observed group.
    """

    features: np.ndarray
    labels: np.ndarray
    K: int
    side_info: Optional[np.ndarray] = None
    G: int = 0

    def __post_init__(self):
        """Normalize array types and validate invariants."""
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        if self.features.ndim != 2:
            raise ValueError(f"Features must be a 2-D matrix, got shape {self.features.shape}")

        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.features):
            raise ValueError(
                f"Label count {len(self.labels)} does not match row count {len(self.features)}"
            )
        if self.K < 1:
            raise ValueError(f"Label count K must be >= 1, got {self.K}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise ValueError(f"Labels must lie in [0, {self.K}), got range "
                             f"[{self.labels.min()}, {self.labels.max()}]")

        if self.side_info is not None:
            self.side_info = np.asarray(self.side_info, dtype=np.int64).reshape(-1)
            if len(self.side_info) != len(self.labels):
                raise ValueError("side_info must have one entry per example")
            present = self.side_info[self.side_info != MISSING_SIDE_INFO]
            if len(present):
                if self.G < 1:
                    raise ValueError("G must be >= 1 when side information is present")
                if present.min() < 0 or present.max() >= self.G:
                    raise ValueError(f"side_info values must lie in [0, {self.G})")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_side_info(self) -> bool:
        return self.side_info is not None and bool(np.any(self.side_info != MISSING_SIDE_INFO))

    def __len__(self) -> int:
        return self.n

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        """Return the examples at ``indices`` as a new dataset."""
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            K=self.K,
            side_info=None if self.side_info is None else self.side_info[idx],
            G=self.G,
        )

    def with_side_info(self, side_info: np.ndarray, G: int) -> "LabeledDataset":
        return LabeledDataset(self.features, self.labels, self.K, side_info, G)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)


@dataclass
class ProbVector:
    """Label probabilities for a single input."""

    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1)
        check_prob_rows(self.p.reshape(1, -1))

    @property
    def K(self) -> int:
        return len(self.p)


@dataclass
class PredictionSet:
    """Hard conformal prediction set as a boolean label mask."""

    member: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        self.member = np.asarray(self.member, dtype=bool).reshape(-1)

    def size(self) -> int:
        return int(self.member.sum())

    def __contains__(self, label: int) -> bool:
        return bool(self.member[label])

    def labels(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.member)]


def check_prob_rows(probs: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """
    Validate a matrix of probability rows.

    Args:
        probs: Array of shape (n, K)
        tol: Allowed deviation of each row sum from 1

    Returns:
        The validated array as float64
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"Expected a 2-D probability matrix, got shape {probs.shape}")
    if np.any(probs < 0) or not np.all(np.isfinite(probs)):
        raise ValueError("Probabilities must be finite and nonnegative")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"Probability rows must sum to 1 (max deviation {worst:.3e})")
    return probs


def as_set_matrix(sets) -> np.ndarray:
    """Convert a list of PredictionSet (or a boolean matrix) to an (n, K) mask."""
    if isinstance(sets, np.ndarray):
        return sets.astype(bool, copy=False)
    sets = list(sets)
    if not sets:
        return np.zeros((0, 0), dtype=bool)
    return np.stack([s.member if isinstance(s, PredictionSet) else np.asarray(s, dtype=bool)
                     for s in sets])
