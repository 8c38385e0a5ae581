"""
Training losses over soft prediction sets.

A soft set assigns each (example, label) a membership in (0, 1). The coverage
event of example i is relaxed to w_i = C(x_i, y_i): conditional means over
covered examples use weights w_i and over uncovered examples 1 - w_i, each
normalized by its sum (floored at WEIGHT_EPS). Set size becomes sum_y C(x, y)
and set mass sum_y C(x, y) Q(y|x). With hard memberships every loss equals the
matching bound evaluated on the induced sets.
"""

import math

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Tensor
from src.core.metrics import binary_entropy

WEIGHT_EPS = 1e-6


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")


def _true_label(matrix: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    return matrix[np.arange(len(labels)), labels]


def _soft_mean(values: Tensor, weights: Tensor) -> Tensor:
    return ad.tsum(weights * values) / ad.maximum(ad.tsum(weights), WEIGHT_EPS)


def soft_sizes(soft_sets: Tensor) -> Tensor:
    return ad.tsum(soft_sets, axis=1)


def soft_set_mass(soft_sets: Tensor, probs: Tensor) -> Tensor:
    return ad.tsum(soft_sets * probs, axis=1)


def loss_ce(probs, labels) -> Tensor:
    """Mean -ln p[y]."""
    return ad.mean(-ad.log(_true_label(ad.as_tensor(probs), labels)))


def loss_ce_logits(logits: Tensor, labels) -> Tensor:
    """Cross-entropy through log-softmax; preferred for training."""
    return ad.mean(-_true_label(ad.log_softmax(logits, axis=1), labels))


def loss_conftr(soft_sets: Tensor) -> Tensor:
    """Log of the mean soft set size."""
    return ad.log(ad.mean(soft_sizes(soft_sets)))


def loss_conftr_class(soft_sets: Tensor, labels, class_weight: float) -> Tensor:
    """Size loss plus class_weight times the mean soft miss of the true label."""
    miss = ad.mean(1.0 - _true_label(soft_sets, labels))
    return loss_conftr(soft_sets) + ad.scale(miss, class_weight)


def loss_fano(soft_sets: Tensor, labels, alpha: float, n_cal: int, K: int) -> Tensor:
    """Relaxed model-agnostic Fano bound on H(Y|X)."""
    _check_alpha(alpha)
    w = _true_label(soft_sets, labels)
    size = soft_sizes(soft_sets)
    uncovered = _soft_mean(ad.log(K - size), 1.0 - w)
    covered = _soft_mean(ad.log(size), w)
    alpha_n = alpha - 1.0 / (n_cal + 1)
    return binary_entropy(alpha) + ad.scale(uncovered, alpha) + ad.scale(covered, 1.0 - alpha_n)


def loss_mb_fano(soft_sets: Tensor, probs: Tensor, labels, alpha: float, n_cal: int) -> Tensor:
    """Relaxed model-based Fano bound: model mass renormalized inside and outside the soft set."""
    _check_alpha(alpha)
    w = _true_label(soft_sets, labels)
    log_true = ad.log(_true_label(probs, labels))
    mass_in = soft_set_mass(soft_sets, probs)
    mass_out = soft_set_mass(1.0 - soft_sets, probs)
    uncovered = _soft_mean(ad.log(mass_out) - log_true, 1.0 - w)
    covered = _soft_mean(ad.log(mass_in) - log_true, w)
    alpha_n = alpha - 1.0 / (n_cal + 1)
    return binary_entropy(alpha) + ad.scale(uncovered, alpha) + ad.scale(covered, 1.0 - alpha_n)


def soft_bernstein_delta(z: Tensor, delta: float) -> Tensor:
    """Empirical Bernstein radius with a differentiable sample variance."""
    n = z.size
    if n < 2:
        raise ValueError(f"Bernstein correction requires n >= 2, got {n}")
    log_term = math.log(2.0 / delta)
    centered = z - ad.mean(z)
    variance = ad.scale(ad.tsum(centered * centered), 1.0 / (n - 1))
    return ad.sqrt(ad.scale(variance, 2.0 * log_term / n)) + 7.0 * log_term / (3.0 * (n - 1))


def loss_dpi(soft_sets: Tensor, probs: Tensor, labels, alpha: float, n_cal: int,
             delta: float) -> Tensor:
    """Relaxed data-processing bound with the Bernstein correction over the batch."""
    _check_alpha(alpha)
    z = soft_set_mass(soft_sets, probs)
    radius = soft_bernstein_delta(z, delta)
    q_in = ad.minimum(ad.mean(z) + radius, 1.0)
    q_out = ad.minimum(ad.mean(1.0 - z) + radius, 1.0)
    alpha_n = alpha - 1.0 / (n_cal + 1)
    return (binary_entropy(alpha) + ad.scale(ad.log(q_in), 1.0 - alpha)
            + ad.scale(ad.log(q_out), alpha_n) + loss_ce(probs, labels))
