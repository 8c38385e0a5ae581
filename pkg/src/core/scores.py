"""Nonconformity scores mapping (probability vector, label) to a real score."""

import logging
from typing import Optional

import numpy as np

from src.core.metrics import LOG_EPS, make_rng
from src.models.dataset import ProbVector, check_prob_rows
from src.models.score_spec import ScoreKind, ScoreSpec

logger = logging.getLogger(__name__)


def _jitter_draws(spec: ScoreSpec, n: int, seed: Optional[int]) -> np.ndarray:
    """One uniform(0, jitter) draw per example, shared by all its labels."""
    if spec.jitter <= 0:
        return np.zeros(n)
    if seed is None:
        raise ValueError("A seed is required when jitter > 0")
    return make_rng(seed).uniform(0.0, spec.jitter, size=n)


def _descending_ranks(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Order labels by decreasing probability, ties broken by label index.

    Returns:
        Tuple of (order, rank) where order[i, j] is the label at position j and
        rank[i, y] is the 1-based position of label y
    """
    n, K = probs.shape
    # Stable sort on -p keeps lower label indices first among ties
    order = np.argsort(-probs, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[np.arange(n)[:, None], order] = np.arange(1, K + 1)[None, :]
    return order, rank


def score_matrix(spec: ScoreSpec, probs: np.ndarray, seed: Optional[int] = None) -> np.ndarray:
    """
    Scores of every label for every example.

    Args:
        spec: Score configuration
        probs: (n, K) probability rows
        seed: Seed for the jitter stream (one draw per row, in row order)

    Returns:
        (n, K) score matrix
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, K = probs.shape

    if spec.kind is ScoreKind.THR_PROB:
        scores = 1.0 - probs
    elif spec.kind is ScoreKind.THR_LOGPROB:
        scores = -np.log(np.maximum(probs, LOG_EPS))
    else:
        order, rank = _descending_ranks(probs)
        ordered = np.take_along_axis(probs, order, axis=1)
        cumsum = np.cumsum(ordered, axis=1)
        # APS: total mass of labels ranked at or above y
        scores = np.take_along_axis(cumsum, rank - 1, axis=1)
        if spec.kind is ScoreKind.RAPS:
            scores = scores + spec.lambda_reg * np.maximum(0, rank - spec.k_reg)

    return scores + _jitter_draws(spec, n, seed)[:, None]


def score_all(spec: ScoreSpec, p, seed: Optional[int] = None) -> np.ndarray:
    """Scores of all K labels for a single probability vector."""
    p = p.p if isinstance(p, ProbVector) else np.asarray(p, dtype=np.float64)
    check_prob_rows(p.reshape(1, -1))
    return score_matrix(spec, p.reshape(1, -1), seed)[0]


def score(spec: ScoreSpec, p, y: int, seed: Optional[int] = None) -> float:
    """Score of label ``y`` under ``p``; consistent with ``score_all``."""
    p = p.p if isinstance(p, ProbVector) else np.asarray(p, dtype=np.float64)
    if not 0 <= y < len(p):
        raise ValueError(f"Label {y} out of range for K={len(p)}")
    return float(score_all(spec, p, seed)[y])


def label_scores(spec: ScoreSpec, probs: np.ndarray, labels: np.ndarray,
                 seed: Optional[int] = None) -> np.ndarray:
    """Score of the true label for each row (calibration scores)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"Labels out of range for K={probs.shape[1]}")
    full = score_matrix(spec, probs, seed)
    return full[np.arange(len(labels)), labels]
