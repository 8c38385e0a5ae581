"""
Lower bounds on prediction-set size from entropy lower bounds.

The entropy lower bound comes either from an exact discrete oracle or from a
quantized pipeline: logits are clustered with k-means, the joint histogram of
(label, cluster) gives a Miller-Madow entropy estimate, and
H(Y|Yq) >= H(Y, Yq) - ln k.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax, xlogy
from sklearn.cluster import KMeans, kmeans_plusplus

from src.core.bounds import set_mass
from src.core.conformal import calibrate, predict_sets
from src.core.metrics import LOG_EPS, binary_entropy
from src.core.scores import label_scores
from src.models.bound_report import EvalBatch
from src.models.score_spec import ScoreKind, ScoreSpec

logger = logging.getLogger(__name__)


@dataclass
class QuantizerModel:
    """k-means codebook; ``objective`` records the sum of squared distances before and after fitting."""

    centroids: np.ndarray
    objective: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))
        if len(self.centroids) < 1 or not np.all(np.isfinite(self.centroids)):
            raise ValueError("QuantizerModel needs at least one finite centroid")

    @property
    def k(self) -> int:
        return len(self.centroids)

    def to_dict(self) -> dict:
        return {"k": self.k, "centroids": self.centroids.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "QuantizerModel":
        return cls(centroids=np.asarray(data["centroids"]))


@dataclass
class EntropyEstimate:
    """Plug-in entropy with its Miller-Madow correction."""

    h_mle: float
    h_mm: float
    observed_bins: int
    n: int


@dataclass
class LowerBound:
    """A lower bound reported raw and clamped at zero."""

    value: float

    @property
    def clamped(self) -> float:
        return max(0.0, self.value)

    @property
    def informative(self) -> bool:
        return self.value > 0.0

    def to_dict(self) -> dict:
        return {"value": self.value, "clamped": self.clamped, "informative": self.informative}


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)


def kmeans(points: np.ndarray, k: int, iters: int, seed: int) -> QuantizerModel:
    """
    Lloyd's algorithm from a seeded k-means++ initialization.

    ``objective`` holds the sum of squared distances at the initialization
    and after the last iteration; ``iters=0`` returns the initialization.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points n={n}")

    random_state = seed % 2**32
    init, _ = kmeans_plusplus(points, n_clusters=k, random_state=random_state)
    objective = [float(np.min(_sq_distances(points, init), axis=1).sum())]
    if iters == 0:
        return QuantizerModel(centroids=init, objective=objective)

    fitted = KMeans(n_clusters=k, init=init, n_init=1, max_iter=iters,
                    random_state=random_state).fit(points)
    objective.append(float(fitted.inertia_))
    logger.debug(f"kmeans converged with k={k} after {fitted.n_iter_} iterations")
    return QuantizerModel(centroids=fitted.cluster_centers_, objective=objective)


def quantize(qm: QuantizerModel, points: np.ndarray) -> np.ndarray:
    """Nearest-centroid id per point; the lowest index wins ties."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.argmin(_sq_distances(points, qm.centroids), axis=1)


def entropy_mle(counts) -> EntropyEstimate:
    """Plug-in entropy of a histogram plus the Miller-Madow bias correction."""
    counts = np.asarray(counts, dtype=np.float64).reshape(-1)
    if np.any(counts < 0):
        raise ValueError("Counts must be nonnegative")
    n = counts.sum()
    if n <= 0:
        raise ValueError("entropy_mle requires a positive total count")
    freqs = counts / n
    h_mle = float(-np.sum(xlogy(freqs, freqs)))
    m_hat = int(np.count_nonzero(counts))
    return EntropyEstimate(h_mle=h_mle, h_mm=h_mle + (m_hat - 1) / (2.0 * n),
                           observed_bins=m_hat, n=int(n))


def cond_entropy_lb(joint_counts: np.ndarray, k: int) -> float:
    """Lower bound H(Y|Yq) >= H_MM(Y, Yq) - ln k from a (K, k) joint histogram."""
    joint_counts = np.asarray(joint_counts)
    if joint_counts.size == 0 or joint_counts.sum() <= 0:
        raise ValueError("cond_entropy_lb requires a nonempty joint histogram")
    return entropy_mle(joint_counts).h_mm - math.log(k)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")


def max_setsize_lb(h_lb: float, alpha: float, n: int, K: int) -> LowerBound:
    """Lower bound on sup ln|C| over inputs and calibration draws."""
    _check_alpha(alpha)
    numerator = h_lb - binary_entropy(alpha) - alpha * math.log(K)
    return LowerBound(numerator / (1.0 - alpha + 1.0 / (n + 1)))


def expected_logsize_lb_simple(h_lb: float, alpha: float, K: int) -> LowerBound:
    """E[ln|C|]+ >= h_lb - h_b(alpha) - alpha ln K."""
    _check_alpha(alpha)
    return LowerBound(h_lb - binary_entropy(alpha) - alpha * math.log(K))


def expected_logsize_lb_mb(h_lb: float, alpha: float, n: int, K: int, batch: EvalBatch) -> LowerBound:
    """
    Model-based lower bound on E[ln|C|]+.

    Uses the renormalized model mass on either side of each prediction set,
    with the uniform-average mass E_u[q] computed as set mass / set size.

    Args:
        h_lb: Lower bound on H(Y|X) (or H(Y|Yq))
        alpha: Miscoverage level
        n: Calibration size behind the prediction sets
        K: Label count
        batch: Evaluation batch, disjoint from the calibration data
    """
    _check_alpha(alpha)
    if batch.n == 0:
        raise ValueError("expected_logsize_lb_mb requires a nonempty batch")
    w = batch.normalized_weights()
    covered = batch.covered
    sizes = batch.set_sizes.astype(np.float64)
    true_probs = np.maximum(batch.probs[np.arange(batch.n), batch.labels], LOG_EPS)
    mass_in = set_mass(batch)
    mass_out = 1.0 - mass_in

    mean_in = np.maximum(mass_in, LOG_EPS) / np.maximum(sizes, 1.0)
    mean_out = np.maximum(mass_out, LOG_EPS) / np.maximum(K - sizes, 1.0)
    term_in = -np.log(true_probs) + np.log(mean_in)
    term_out = -np.log(true_probs) + np.log(mean_out)

    def cond_mean(values, mask):
        total = w[mask].sum()
        return float(np.dot(w[mask], values[mask]) / total) if total > 0 else 0.0

    a0 = cond_mean(term_out, ~covered)
    a1 = cond_mean(term_in, covered)
    scale = (1.0 - alpha) / (1.0 - alpha + 1.0 / (n + 1))
    value = scale * (h_lb - binary_entropy(alpha) - alpha * math.log(K) - alpha * a0) - (1.0 - alpha) * a1
    return LowerBound(value)


def empirical_logsize_plus(sets: np.ndarray) -> float:
    """Empirical E[ln|C|]+ with empty sets contributing 0."""
    sizes = np.asarray(sets, dtype=bool).sum(axis=1)
    return float(np.mean(np.log(np.maximum(sizes, 1))))


@dataclass
class SetSizeRow:
    """Set-size bounds at one alpha."""

    alpha: float
    h_lb: float
    simple: LowerBound
    model_based: LowerBound
    max_size: LowerBound
    empirical: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "h_lb": self.h_lb,
            "simple": self.simple.to_dict(),
            "model_based": self.model_based.to_dict(),
            "max_size": self.max_size.to_dict(),
            "empirical_logsize_plus": self.empirical,
        }


def run_quantized_setsize(logits_cal: np.ndarray, labels_cal: np.ndarray,
                          logits_test: np.ndarray, labels_test: np.ndarray,
                          k: int, alphas: Sequence[float], seed: int,
                          iters: int = 100, spec: Optional[ScoreSpec] = None) -> list[SetSizeRow]:
    """
    Quantized set-size experiment.

    Centroids and the joint histogram come from the calibration logits. For
    the model-based bound the calibration set is split into two equal halves:
    the first fits the threshold and the second evaluates the bound terms.
    The empirical estimate calibrates on all quantized calibration logits and
    measures E[ln|C|]+ on the quantized test logits.
    """
    spec = spec or ScoreSpec(kind=ScoreKind.THR_PROB)
    logits_cal = np.asarray(logits_cal, dtype=np.float64)
    labels_cal = np.asarray(labels_cal, dtype=np.int64)
    K = logits_cal.shape[1]

    qm = kmeans(logits_cal, k, iters, seed)
    codes_cal = quantize(qm, logits_cal)
    codes_test = quantize(qm, logits_test)
    code_probs = softmax(qm.centroids, axis=1)
    probs_cal = code_probs[codes_cal]
    probs_test = code_probs[codes_test]

    joint = np.zeros((K, k))
    np.add.at(joint, (labels_cal, codes_cal), 1.0)
    h_lb = cond_entropy_lb(joint, k)
    logger.info(f"Quantized entropy lower bound H(Y|Yq) >= {h_lb:.4f} nats (k={k})")

    half = len(labels_cal) // 2
    rows = []
    for alpha in alphas:
        first = calibrate(label_scores(spec, probs_cal[:half], labels_cal[:half]), alpha)
        eval_batch = EvalBatch(probs=probs_cal[half:], labels=labels_cal[half:],
                               sets=predict_sets(first, spec, probs_cal[half:]))
        full = calibrate(label_scores(spec, probs_cal, labels_cal), alpha)
        test_sets = predict_sets(full, spec, probs_test)
        rows.append(SetSizeRow(
            alpha=alpha,
            h_lb=h_lb,
            simple=expected_logsize_lb_simple(h_lb, alpha, K),
            model_based=expected_logsize_lb_mb(h_lb, alpha, half, K, eval_batch),
            max_size=max_setsize_lb(h_lb, alpha, len(labels_cal), K),
            empirical=empirical_logsize_plus(test_sets),
        ))
    return rows
