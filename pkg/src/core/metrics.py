"""Dataset splitting, coverage/inefficiency metrics and entropy helpers."""

import logging
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from src.models.dataset import LabeledDataset, as_set_matrix

logger = logging.getLogger(__name__)

# Floor applied to probabilities before taking logs
LOG_EPS = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    """Explicit-state generator for a 64-bit seed."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"Seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministically derive a child seed from ``seed`` and integer keys."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split(ds: LabeledDataset, cal_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """
    Randomly partition a dataset into calibration and test parts.

    Args:
        ds: Dataset to split
        cal_fraction: Fraction of examples assigned to calibration, in (0, 1)
        seed: Seed determining the permutation

    Returns:
        Tuple of (calibration, test) with sizes floor(n * cal_fraction) and the remainder
    """
    if ds.n == 0:
        raise ValueError("Cannot split an empty dataset")
    if not 0.0 < cal_fraction < 1.0:
        raise ValueError(f"cal_fraction must lie in (0, 1), got {cal_fraction}")

    n_cal = int(np.floor(ds.n * cal_fraction))
    if n_cal == 0 or n_cal == ds.n:
        raise ValueError(
            f"Split of n={ds.n} at fraction {cal_fraction} leaves an empty part "
            f"(calibration size {n_cal})"
        )

    perm = make_rng(seed).permutation(ds.n)
    return ds.subset(perm[:n_cal]), ds.subset(perm[n_cal:])


def coverage(sets, labels: Sequence[int]) -> float:
    """Fraction of examples whose label lies in its prediction set."""
    mask = as_set_matrix(sets)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) == 0:
        raise ValueError("coverage requires a nonempty input")
    if len(mask) != len(labels):
        raise ValueError(f"Got {len(mask)} sets for {len(labels)} labels")
    return float(np.mean(mask[np.arange(len(labels)), labels]))


def miscoverage(sets, labels: Sequence[int]) -> float:
    return 1.0 - coverage(sets, labels)


def inefficiency(sets) -> float:
    """Mean prediction set size."""
    mask = as_set_matrix(sets)
    if len(mask) == 0:
        raise ValueError("inefficiency requires a nonempty input")
    return float(np.mean(mask.sum(axis=1)))


def binary_entropy(p: float) -> float:
    """Binary entropy in nats with 0 ln 0 = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"binary_entropy requires p in [0, 1], got {p}")
    return float(-xlogy(p, p) - xlogy(1.0 - p, 1.0 - p))


def entropy_of_rows(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each probability row."""
    probs = np.asarray(probs, dtype=np.float64)
    return -np.sum(xlogy(probs, probs), axis=-1)


def binary_kl(p: float, q: float) -> float:
    """d_KL(p || q) between Bernoulli laws in nats, q clamped to [eps, 1 - eps]."""
    if p == q:
        return 0.0
    q = min(max(q, LOG_EPS), 1.0 - LOG_EPS)
    return float(xlogy(p, p) - xlogy(p, q) + xlogy(1.0 - p, 1.0 - p) - xlogy(1.0 - p, 1.0 - q))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation, as reported across split seeds."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(values: Sequence[float], digits: int = 2) -> str:
    """Format as ``mean_{±std}`` for table output."""
    mean, std = mean_std(values)
    return f"{mean:.{digits}f}_{{±{std:.{digits}f}}}"
