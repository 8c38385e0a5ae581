from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Optional

from src.models.experiment_cell import ExperimentCell


@dataclass
class CellResult:
    """Result of running one experiment cell."""

    success: bool
    cell: ExperimentCell
    value: Any = None
    error: Optional[str] = None
    elapsed: Optional[float] = None  # seconds
    timestamp: datetime = field(default_factory=datetime.now)

    def unwrap(self) -> Any:
        """Return the value, or raise when the cell failed."""
        if not self.success:
            raise RuntimeError(f"Cell {self.cell.name} failed: {self.error}")
        return self.value

    def to_dict(self) -> dict:
        """Convert result to dictionary for logging/export."""
        value = self.value.to_dict() if hasattr(self.value, "to_dict") else self.value
        return {
            'success': self.success,
            'cell': self.cell.to_dict(),
            'value': value if isinstance(value, (dict, list, int, float, str, type(None))) else repr(value),
            'error': self.error,
            'elapsed_seconds': self.elapsed,
            'timestamp': self.timestamp.isoformat()
        }
