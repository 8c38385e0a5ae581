"""Split-conformal calibration, hard prediction sets and Mondrian calibration."""

import logging
import math
from typing import Mapping, Optional

import numpy as np

from src.core.scores import score_all, score_matrix
from src.models.calibration import Calibration, GroupCalibration
from src.models.dataset import PredictionSet
from src.models.errors import conformal_rank
from src.models.score_spec import ScoreSpec

logger = logging.getLogger(__name__)


def calibrate(cal_scores, alpha: float) -> Calibration:
    """
    Fit the split-conformal threshold.

    The threshold is the exact order statistic r = ceil((n+1)(1-alpha)) of the
    calibration scores, or +inf when r > n.

    Args:
        cal_scores: Finite calibration scores
        alpha: Target miscoverage in (0, 1)

    Returns:
        Calibration with q_hat, n and alpha
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    scores = np.sort(np.asarray(cal_scores, dtype=np.float64).reshape(-1))
    if not np.all(np.isfinite(scores)):
        raise ValueError("Calibration scores must be finite")

    n = len(scores)
    if n == 0:
        logger.warning("Empty calibration set: threshold is +inf and every set is full")
        return Calibration(q_hat=math.inf, n=0, alpha=alpha)

    r = conformal_rank(n, alpha)
    if r > n:
        logger.warning(f"Calibration size {n} too small for alpha={alpha} (rank {r}); q_hat=+inf")
        return Calibration(q_hat=math.inf, n=n, alpha=alpha)

    q_hat = float(scores[r - 1])
    logger.debug(f"Calibrated q_hat={q_hat:.6f} from n={n}, alpha={alpha}, rank={r}")
    return Calibration(q_hat=q_hat, n=n, alpha=alpha)


def sets_from_scores(cal: Calibration, scores: np.ndarray) -> np.ndarray:
    """Boolean set mask: member iff score <= q_hat."""
    scores = np.asarray(scores, dtype=np.float64)
    if cal.is_trivial:
        return np.ones(scores.shape, dtype=bool)
    return scores <= cal.q_hat


def predict_set(cal: Calibration, spec: ScoreSpec, p, seed: Optional[int] = None) -> PredictionSet:
    """Prediction set for one probability vector."""
    return PredictionSet(sets_from_scores(cal, score_all(spec, p, seed)))


def predict_sets(cal: Calibration, spec: ScoreSpec, probs: np.ndarray,
                 seed: Optional[int] = None) -> np.ndarray:
    """Prediction set masks for a batch of probability rows."""
    return sets_from_scores(cal, score_matrix(spec, probs, seed))


def mondrian_calibrate(cal_scores_by_group: Mapping[int, np.ndarray], alpha: float,
                       fallback: Optional[Calibration] = None) -> GroupCalibration:
    """
    Calibrate each group separately.

    Args:
        cal_scores_by_group: Map of group id to that group's calibration scores
        alpha: Target miscoverage
        fallback: Optional global calibration used for unseen groups

    Returns:
        GroupCalibration holding one Calibration per group with scores
    """
    per_group = {}
    for group, scores in sorted(cal_scores_by_group.items()):
        scores = np.asarray(scores)
        if len(scores) == 0:
            continue
        per_group[int(group)] = calibrate(scores, alpha)
    logger.info(f"Mondrian calibration over {len(per_group)} groups at alpha={alpha}")
    return GroupCalibration(per_group=per_group, fallback=fallback)


def mondrian_predict(gc: GroupCalibration, group: Optional[int], spec: ScoreSpec, p,
                     seed: Optional[int] = None) -> PredictionSet:
    """Prediction set using the threshold of the example's group."""
    cal, used_fallback = gc.for_group(group)
    if used_fallback:
        logger.debug(f"Group {group} not calibrated; using the global threshold")
    return predict_set(cal, spec, p, seed)


def mondrian_predict_sets(gc: GroupCalibration, groups: np.ndarray,
                          scores: np.ndarray) -> tuple[np.ndarray, int]:
    """
    Batch Mondrian sets from precomputed scores.

    Args:
        gc: Group calibrations
        groups: Group id per row, or None entries / negative ids for no group
        scores: (n, K) score matrix

    Returns:
        Tuple of (set mask, number of rows that used the fallback threshold)
    """
    mask = np.zeros(scores.shape, dtype=bool)
    fallbacks = 0
    for i, group in enumerate(groups):
        key = None if group is None or group < 0 else int(group)
        cal, used_fallback = gc.for_group(key)
        fallbacks += int(used_fallback)
        mask[i] = sets_from_scores(cal, scores[i])
    if fallbacks:
        logger.info(f"Mondrian fallback to global threshold for {fallbacks} examples")
    return mask, fallbacks
