from dataclasses import dataclass, field
import math


def _encode_threshold(q_hat: float):
    return "inf" if math.isinf(q_hat) else q_hat


def _decode_threshold(value) -> float:
    if isinstance(value, str):
        if value.lower() != "inf":
            raise ValueError(f"Unrecognized threshold encoding: {value!r}")
        return math.inf
    return float(value)


@dataclass(frozen=True)
class Calibration:
    """Fitted split-conformal threshold with its (alpha, n) provenance."""

    q_hat: float
    n: int
    alpha: float

    @property
    def alpha_n(self) -> float:
        """Upper-coverage slack: coverage <= 1 - alpha_n."""
        return self.alpha - 1.0 / (self.n + 1)

    @property
    def is_trivial(self) -> bool:
        return math.isinf(self.q_hat)

    def to_dict(self) -> dict:
        return {"q_hat": _encode_threshold(self.q_hat), "n": self.n, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, data: dict) -> "Calibration":
        return cls(q_hat=_decode_threshold(data["q_hat"]), n=int(data["n"]), alpha=float(data["alpha"]))


@dataclass
class GroupCalibration:
    """Per-group (Mondrian) calibrations with an optional global fallback."""

    per_group: dict[int, Calibration] = field(default_factory=dict)
    fallback: Calibration | None = None

    def for_group(self, group: int | None) -> tuple[Calibration, bool]:
        """
        Look up the calibration used for ``group``.

        Returns:
            Tuple of (calibration, used_fallback)
        """
        if group is not None and group in self.per_group:
            return self.per_group[group], False
        if self.fallback is None:
            raise KeyError(f"Unknown group {group} and no fallback calibration supplied")
        return self.fallback, True

    def to_dict(self) -> dict:
        return {
            "per_group": {str(g): c.to_dict() for g, c in sorted(self.per_group.items())},
            "fallback": self.fallback.to_dict() if self.fallback else None,
        }
