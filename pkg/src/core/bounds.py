"""
Upper bounds on the conditional entropy H(Y|X) from conformal prediction sets.

All quantities are in nats. Probabilities are clamped to [LOG_EPS, 1] before
every log and the number of clamps is surfaced in the BoundReport. Conditional
means over an empty coverage partition are defined as 0.
"""

import logging
import math
from typing import Optional

import numpy as np

from src.core.datagen import DiscreteTaskSpec
from src.core.metrics import LOG_EPS, binary_entropy, binary_kl
from src.models.bound_report import BoundReport, EvalBatch
from src.models.dataset import as_set_matrix

logger = logging.getLogger(__name__)


class _ClampCounter:
    """Clamped natural log that counts how often the clamp was applied."""

    def __init__(self):
        self.events = 0

    def log(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        clipped = np.clip(values, LOG_EPS, 1.0)
        self.events += int(np.count_nonzero(clipped != values))
        return np.log(clipped)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 0.5:
        raise ValueError(
            f"alpha must lie in (0, 0.5), got {alpha}: the bounds replace the true "
            f"miscoverage by alpha, which requires h_b to be increasing on (0, alpha]"
        )


def _alpha_n(alpha: float, n: int) -> float:
    return alpha - 1.0 / (n + 1)


def _cond_mean(values: np.ndarray, mask: np.ndarray, weights: np.ndarray) -> float:
    """Weighted mean of ``values`` over ``mask``; 0 when the partition is empty."""
    w = weights[mask]
    total = w.sum()
    if total <= 0:
        return 0.0
    return float(np.dot(w, values[mask]) / total)


def _weights(n: int, weights: Optional[np.ndarray]) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    return w / w.sum()


def _report(method: str, terms: dict, alpha: float, n: int, delta=None, clip_events=0) -> BoundReport:
    # math.fsum keeps the sum order-independent
    return BoundReport(method=method, value=math.fsum(terms.values()), terms=terms,
                       alpha=alpha, n=n, delta=delta, clip_events=clip_events)


def bernstein_delta(z, delta: float) -> float:
    """
    Empirical Bernstein confidence radius for the mean of [0, 1] variables.

    sqrt(2 V_n ln(2/delta) / n) + 7 ln(2/delta) / (3 (n - 1)), V_n the
    unbiased sample variance.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    n = len(z)
    if n < 2:
        raise ValueError(f"bernstein_delta requires n >= 2, got {n}")
    if np.any(z < 0) or np.any(z > 1):
        raise ValueError("bernstein_delta requires entries in [0, 1]")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    log_term = math.log(2.0 / delta)
    variance = float(np.var(z, ddof=1))
    return math.sqrt(2.0 * variance * log_term / n) + 7.0 * log_term / (3.0 * (n - 1))


def set_mass(batch: EvalBatch) -> np.ndarray:
    """Z_i: the model's total probability on the prediction set of example i."""
    return np.sum(batch.probs * batch.sets, axis=1)


def cross_entropy(batch: EvalBatch, clamp: Optional[_ClampCounter] = None) -> float:
    clamp = clamp or _ClampCounter()
    true_probs = batch.probs[np.arange(batch.n), batch.labels]
    return float(np.dot(batch.normalized_weights(), -clamp.log(true_probs)))


def dpi_bound(batch: EvalBatch, alpha: float, delta: Optional[float] = 0.05,
              n_cal: Optional[int] = None) -> BoundReport:
    """
    Data-processing-inequality bound with an empirical Bernstein correction.

    Args:
        batch: Evaluation sample
        alpha: Miscoverage level in (0, 0.5)
        delta: Confidence parameter; None evaluates the plug-in form without
            the Bernstein correction (population batches)
        n_cal: Calibration size used in alpha_n (defaults to the batch size)

    Returns:
        BoundReport with terms h_b, covered, uncovered and cross_entropy
    """
    _check_alpha(alpha)
    if batch.n < 2:
        raise ValueError(f"dpi_bound requires n >= 2, got {batch.n}")
    n_cal = batch.n if n_cal is None else n_cal
    clamp = _ClampCounter()
    w = batch.normalized_weights()

    z = np.clip(set_mass(batch), 0.0, 1.0)
    radius = 0.0 if delta is None else bernstein_delta(z, delta)
    q_in = min(1.0, float(np.dot(w, z)) + radius)
    q_out = min(1.0, float(np.dot(w, 1.0 - z)) + radius)
    a_n = _alpha_n(alpha, n_cal)

    terms = {
        "h_b": binary_entropy(alpha),
        "covered": (1.0 - alpha) * float(clamp.log(q_in)),
        "uncovered": a_n * float(clamp.log(q_out)),
        "cross_entropy": cross_entropy(batch, clamp),
    }
    if clamp.events:
        logger.warning(f"dpi_bound applied {clamp.events} probability clamps")
    method = "dpi" if delta is not None else "dpi_plugin"
    return _report(method, terms, alpha, n_cal, delta=delta, clip_events=clamp.events)


def dpi_exact(batch: EvalBatch) -> float:
    """
    Cross-entropy minus the binary KL between empirical coverage and model set mass.

    Never exceeds the empirical cross-entropy.
    """
    if batch.n == 0:
        raise ValueError("dpi_exact requires a nonempty batch")
    w = batch.normalized_weights()
    p_cov = float(np.dot(w, batch.covered))
    q_cov = float(np.dot(w, np.clip(set_mass(batch), 0.0, 1.0)))
    return cross_entropy(batch) - max(0.0, binary_kl(p_cov, q_cov))


def mb_fano_bound(batch: EvalBatch, alpha: float, n_cal: Optional[int] = None) -> BoundReport:
    """
    Model-based Fano bound: the model's mass renormalized inside or outside the set.

    value = h_b(alpha) + alpha * E[-ln Q(y | x, y not in C)] + (1 - alpha_n) * E[-ln Q(y | x, y in C)]
    """
    _check_alpha(alpha)
    n_cal = batch.n if n_cal is None else n_cal
    clamp = _ClampCounter()
    w = batch.normalized_weights()
    covered = batch.covered
    true_probs = batch.probs[np.arange(batch.n), batch.labels]
    mass_in = set_mass(batch)
    mass_out = np.sum(batch.probs * ~batch.sets, axis=1)

    # Each row is logged only on the side of the partition it belongs to
    neg_log_in = np.zeros(batch.n)
    neg_log_out = np.zeros(batch.n)
    inside = np.flatnonzero(covered)
    outside = np.flatnonzero(~covered)
    neg_log_in[inside] = -clamp.log(true_probs[inside] / np.maximum(mass_in[inside], LOG_EPS))
    neg_log_out[outside] = -clamp.log(true_probs[outside] / np.maximum(mass_out[outside], LOG_EPS))

    terms = {
        "h_b": binary_entropy(alpha),
        "uncovered": alpha * _cond_mean(neg_log_out, ~covered, w),
        "covered": (1.0 - _alpha_n(alpha, n_cal)) * _cond_mean(neg_log_in, covered, w),
    }
    return _report("mb_fano", terms, alpha, n_cal, clip_events=clamp.events)


def simple_fano_bound(sets, labels, alpha: float, n: int, K: int,
                      weights: Optional[np.ndarray] = None) -> BoundReport:
    """
    Model-agnostic Fano bound from set sizes alone.

    value = h_b(alpha) + alpha * E[ln(K - |C|) | uncovered] + (1 - alpha_n) * E[ln |C| | covered]
    """
    _check_alpha(alpha)
    mask = as_set_matrix(sets)
    labels = np.asarray(labels, dtype=np.int64)
    if len(mask) != len(labels) or len(labels) == 0:
        raise ValueError("simple_fano_bound requires equal, nonzero numbers of sets and labels")
    w = _weights(len(labels), weights)
    sizes = mask.sum(axis=1).astype(np.float64)
    covered = mask[np.arange(len(labels)), labels]

    # Covered rows have |C| >= 1 and uncovered rows have K - |C| >= 1
    log_size = np.log(np.where(covered, sizes, 1.0))
    log_rest = np.log(np.where(covered, 1.0, K - sizes))

    terms = {
        "h_b": binary_entropy(alpha),
        "uncovered": alpha * _cond_mean(log_rest, ~covered, w),
        "covered": (1.0 - _alpha_n(alpha, n)) * _cond_mean(log_size, covered, w),
    }
    return _report("simple_fano", terms, alpha, n)


def conftr_bound(mean_set_size: float, alpha: float, n: int, K: int) -> float:
    """
    Size-loss bound: lambda_alpha + (1 - alpha_n) ln E|C|.

    lambda_alpha = h_b(alpha) + alpha ln K - (1 - alpha_n) ln(1 - alpha).
    """
    if mean_set_size <= 0:
        raise ValueError(f"mean_set_size must be positive, got {mean_set_size}")
    _check_alpha(alpha)
    one_minus_an = 1.0 - _alpha_n(alpha, n)
    lam = binary_entropy(alpha) + alpha * math.log(K) - one_minus_an * math.log(1.0 - alpha)
    return lam + one_minus_an * math.log(mean_set_size)


def list_fano_bound(sets, alpha: float, K: int, weights: Optional[np.ndarray] = None) -> float:
    """Fano bound for variable-size list decoding: h_b + alpha ln K + E[ln|C|]+."""
    _check_alpha(alpha)
    mask = as_set_matrix(sets)
    sizes = mask.sum(axis=1)
    w = _weights(len(sizes), weights)
    log_plus = np.log(np.maximum(sizes, 1))
    return binary_entropy(alpha) + alpha * math.log(K) + float(np.dot(w, log_plus))


def fano_exact_bound(batch: EvalBatch) -> BoundReport:
    """
    Fano bound with the realised miscoverage of the batch in place of alpha.

    The un-relaxed form: valid for any sets that are functions of x.
    """
    w = batch.normalized_weights()
    covered = batch.covered
    p_err = float(np.dot(w, ~covered))
    sizes = batch.set_sizes.astype(np.float64)
    log_size = np.log(np.where(covered, sizes, 1.0))
    log_rest = np.log(np.where(covered, 1.0, batch.K - sizes))
    terms = {
        "h_b": binary_entropy(min(max(p_err, 0.0), 1.0)),
        "uncovered": p_err * _cond_mean(log_rest, ~covered, w),
        "covered": (1.0 - p_err) * _cond_mean(log_size, covered, w),
    }
    return _report("fano_exact", terms, p_err, batch.n)


def population_batch(task: DiscreteTaskSpec, q_table: np.ndarray, set_table: np.ndarray) -> EvalBatch:
    """
    Exact population evaluation batch over every (x, y) with positive mass.

    Args:
        task: Discrete task providing p(x) and p(y|x)
        q_table: Model distribution Q(y|x), shape (|X|, K)
        set_table: Prediction set per input value, boolean (|X|, K)

    Returns:
        EvalBatch weighted by p(x) p(y|x)
    """
    joint = task.marginal[:, None] * task.conditional
    xs, ys = np.nonzero(joint > 0)
    return EvalBatch(probs=np.asarray(q_table, dtype=np.float64)[xs], labels=ys,
                     sets=np.asarray(set_table, dtype=bool)[xs], weights=joint[xs, ys])


def population_sets(task: DiscreteTaskSpec, score_table: np.ndarray, alpha: float) -> np.ndarray:
    """
    Smallest thresholded sets whose population coverage is at least 1 - alpha.

    Args:
        task: Discrete task
        score_table: Score of each (x, y), shape (|X|, K)
        alpha: Target miscoverage

    Returns:
        Boolean (|X|, K) set table
    """
    joint = task.marginal[:, None] * task.conditional
    order = np.argsort(score_table, axis=None, kind="stable")
    covered_mass = np.cumsum(joint.reshape(-1)[order])
    idx = int(np.searchsorted(covered_mass, 1.0 - alpha - 1e-12))
    q_hat = score_table.reshape(-1)[order[min(idx, len(order) - 1)]]
    return score_table <= q_hat


POPULATION_METHODS = ("simple_fano", "mb_fano", "list_fano", "dpi_plugin", "dpi_exact", "fano_exact")


def population_bound(task: DiscreteTaskSpec, method: str, alpha: float, n: int = 10**9) -> float:
    """
    Evaluate one bound family exactly on a discrete task.

    The model is the true conditional, sets threshold 1 - p(y|x) at population
    coverage >= 1 - alpha, and the bound is evaluated at the realised
    miscoverage with a very large calibration size.

    Args:
        task: Discrete task
        method: One of POPULATION_METHODS
        alpha: Target miscoverage in (0, 0.5)
        n: Calibration size entering alpha_n
    """
    _check_alpha(alpha)
    if method not in POPULATION_METHODS:
        raise ValueError(f"Unknown bound method {method!r}; expected one of {POPULATION_METHODS}")
    q_table = task.conditional
    batch = population_batch(task, q_table, population_sets(task, 1.0 - q_table, alpha))
    w = batch.normalized_weights()
    realised = float(np.dot(w, ~batch.covered))
    a = min(max(realised, 1e-12), 0.5 - 1e-12)

    if method == "simple_fano":
        return simple_fano_bound(batch.sets, batch.labels, a, n, task.K, weights=w).value
    if method == "mb_fano":
        return mb_fano_bound(batch, a, n_cal=n).value
    if method == "list_fano":
        return list_fano_bound(batch.sets, a, task.K, weights=w)
    if method == "dpi_plugin":
        return dpi_bound(batch, a, delta=None, n_cal=n).value
    if method == "dpi_exact":
        return dpi_exact(batch)
    return fano_exact_bound(batch).value
