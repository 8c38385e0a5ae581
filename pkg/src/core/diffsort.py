"""
Differentiable sorting, soft quantiles and soft prediction-set membership.

soft_sort runs a bitonic sorting network in which every comparator mixes its
two inputs with weight w = g(steepness * (a - b)), g a logistic or Cauchy CDF.
Each comparator preserves the sum of its inputs.
"""

from dataclasses import dataclass
from functools import lru_cache
import logging
import math

import numpy as np

from src.core import autodiff as ad
from src.core.autodiff import Tensor
from src.models.errors import InfeasibleRankError, conformal_rank
from src.models.train_config import RelaxConfig, SwapKind

logger = logging.getLogger(__name__)

# Padding value for the power-of-two network
LARGE = 1e9


@dataclass(frozen=True)
class _Layer:
    lo: np.ndarray
    hi: np.ndarray
    inverse: np.ndarray
    soft: np.ndarray
    hard_w: np.ndarray


@lru_cache(maxsize=64)
def _network(m: int) -> tuple[int, tuple[_Layer, ...]]:
    """
    Comparator layers of an ascending bitonic network over m values.

    Padding positions are tracked through the network: a comparator between a
    real value and padding routes the padding upward with a hard swap, so only
    comparators between two real values are relaxed.
    """
    size = 1 << max(0, math.ceil(math.log2(m)))
    pad = np.arange(size) >= m
    layers = []
    k = 2
    while k <= size:
        j = k // 2
        while j >= 1:
            idx = np.arange(size)
            partner = idx ^ j
            first = idx[partner > idx]
            second = first ^ j
            ascending = (first & k) == 0
            lo = np.where(ascending, first, second)
            hi = np.where(ascending, second, first)

            pad_lo, pad_hi = pad[lo], pad[hi]
            soft = (~pad_lo & ~pad_hi).astype(np.float64)
            # Mixed pair: w = 1 swaps the padding from lo to hi
            hard_w = (pad_lo & ~pad_hi).astype(np.float64)
            new_pad = pad.copy()
            new_pad[lo] = pad_lo & pad_hi
            new_pad[hi] = pad_lo | pad_hi
            pad = new_pad

            perm = np.concatenate([lo, hi])
            inverse = np.empty_like(perm)
            inverse[perm] = np.arange(size)
            layers.append(_Layer(lo=lo, hi=hi, inverse=inverse, soft=soft, hard_w=hard_w))
            j //= 2
        k *= 2
    return size, tuple(layers)


def swap_weight(t: Tensor, kind: SwapKind) -> Tensor:
    """Comparator CDF g(t): logistic sigmoid or atan(t)/pi + 1/2."""
    if kind is SwapKind.CAUCHY:
        return ad.scale(ad.atan(t), 1.0 / math.pi) + 0.5
    return ad.sigmoid(t)


def soft_sort(values, cfg: RelaxConfig) -> Tensor:
    """
    Relaxed ascending sort.

    Args:
        values: 1-D tensor of length m >= 1
        cfg: Relaxation settings; steepness -> inf recovers the exact sort

    Returns:
        Tensor of length m
    """
    values = ad.as_tensor(values)
    if values.ndim != 1 or values.size == 0:
        raise ValueError(f"soft_sort requires a nonempty vector, got shape {values.shape}")
    m = values.size
    if m == 1:
        return ad.gather(values, slice(None))

    size, layers = _network(m)
    v = values if size == m else ad.concat([values, Tensor(np.full(size - m, LARGE))])
    for layer in layers:
        a = v[layer.lo]
        b = v[layer.hi]
        w = swap_weight(ad.scale(a - b, cfg.steepness), cfg.swap_kind) * layer.soft + layer.hard_w
        keep = 1.0 - w
        low = keep * a + w * b
        high = w * a + keep * b
        v = ad.concat([low, high])[layer.inverse]
    return v[:m]


def soft_quantile(scores, alpha: float, cfg: RelaxConfig) -> Tensor:
    """
    Soft conformal threshold: the soft-sorted score at rank ceil((m+1)(1-alpha)).

    Raises:
        InfeasibleRankError: when the rank exceeds m
    """
    scores = ad.as_tensor(scores)
    m = scores.size
    r = conformal_rank(m, alpha)
    if r > m:
        raise InfeasibleRankError(m, alpha, context="soft_quantile")
    return soft_sort(scores, cfg)[r - 1]


def soft_membership(q_hat, score, cfg: RelaxConfig) -> Tensor:
    """sigmoid((q_hat - score) / T); broadcasts over score arrays."""
    return ad.sigmoid(ad.scale(ad.as_tensor(q_hat) - score, 1.0 / cfg.temperature))
