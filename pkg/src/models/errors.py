import math


class ConfigError(ValueError):
    """Raised when an experiment config fails schema validation."""


class DatasetFormatError(ValueError):
    """Raised when an IDX, CSV or ECD1 file cannot be parsed."""


class InfeasibleRankError(ValueError):
    """
    Raised when a calibration sample is too small for the requested alpha.

    The conformal rank r = ceil((n + 1)(1 - alpha)) must not exceed n.
    """

    def __init__(self, n: int, alpha: float, context: str = ""):
        self.n = n
        self.alpha = alpha
        self.rank = conformal_rank(n, alpha)
        prefix = f"{context}: " if context else ""
        super().__init__(
            f"{prefix}rank ceil(({n}+1)*(1-{alpha})) = {self.rank} exceeds "
            f"calibration size {n}; need at least {min_calibration_size(alpha)} "
            f"calibration points for alpha={alpha}"
        )


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, epoch: int, step: int, last_finite_loss: float | None):
        self.epoch = epoch
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"Non-finite loss at epoch {epoch}, step {step} "
            f"(last finite loss: {last_finite_loss})"
        )


def conformal_rank(n: int, alpha: float) -> int:
    """1-based order statistic used by split conformal calibration."""
    # Rounded before ceil so that e.g. 10 * 0.9 does not become 9.000000000000002
    return int(math.ceil(round((n + 1) * (1.0 - alpha), 9)))


def min_calibration_size(alpha: float) -> int:
    """Smallest n with conformal_rank(n, alpha) <= n."""
    n = max(1, int((1.0 - alpha) / alpha) - 1)
    while conformal_rank(n, alpha) > n:
        n += 1
    return n
