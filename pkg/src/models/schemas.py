"""Shapes of the JSON reports written by each command."""

from numbers import Real

_NUMBER = (Real, str)  # "inf" stands in for infinite thresholds

COMMON_FIELDS = {"command": str, "config": dict}

REPORT_SCHEMAS: dict[str, dict[str, type | tuple]] = {
    "gen-data": {"dataset": dict},
    "calibrate": {"calibrations": list},
    "evaluate": {"cells": list, "summary": list},
    "bounds": {"cells": list, "summary": list},
    "setsize": {"rows": list, "h_lb": _NUMBER},
    "train": {"history": list, "checkpoint": str, "final": dict},
    "sideinfo": {"cells": list, "summary": list},
    "fed-train": {"rounds": list, "personalized": list, "final": dict},
    "repro": {"criterion": str, "passed": bool, "measured": dict},
}

# Keys every entry of a list field must carry
ROW_FIELDS: dict[str, dict[str, tuple[str, ...]]] = {
    "calibrate": {"calibrations": ("seed", "alpha", "q_hat", "n")},
    "evaluate": {"cells": ("seed", "alpha", "score", "coverage", "inefficiency"),
                 "summary": ("alpha", "score", "coverage", "inefficiency")},
    "bounds": {"cells": ("seed", "alpha", "method", "value"),
               "summary": ("alpha", "method", "value")},
    "setsize": {"rows": ("alpha", "simple", "model_based", "max_size")},
    "train": {"history": ("epoch", "loss", "lr")},
    "sideinfo": {"cells": ("seed", "alpha", "availability", "coverage", "inefficiency"),
                 "summary": ("alpha", "availability", "coverage", "inefficiency")},
    "fed-train": {"rounds": ("round", "coverage", "inefficiency")},
}


def validate_report(command: str, report: dict) -> None:
    """
    Check a report against its command's schema.

    Raises:
        ValueError: naming the first missing key or mistyped value
    """
    if command not in REPORT_SCHEMAS:
        raise ValueError(f"No report schema for command {command!r}")
    if not isinstance(report, dict):
        raise ValueError(f"{command} report must be an object, got {type(report).__name__}")
    for key, expected in {**COMMON_FIELDS, **REPORT_SCHEMAS[command]}.items():
        if key not in report:
            raise ValueError(f"{command} report is missing required key {key!r}")
        # bool is a Real; only accept it where bool is asked for
        value = report[key]
        if isinstance(value, bool) and expected is not bool:
            raise ValueError(f"{command} report key {key!r} must not be a boolean")
        if not isinstance(value, expected):
            raise ValueError(f"{command} report key {key!r} has type {type(value).__name__}")
    for key, required in ROW_FIELDS.get(command, {}).items():
        for i, row in enumerate(report[key]):
            if not isinstance(row, dict):
                raise ValueError(f"{command} report {key}[{i}] must be an object")
            missing = [k for k in required if k not in row]
            if missing:
                raise ValueError(f"{command} report {key}[{i}] is missing {missing}")
