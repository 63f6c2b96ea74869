"""relaxmt: two-step screening-and-relaxation multiple testing procedures."""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    ConsistencyError,
    GridFileError,
    InputError,
    RelaxError,
    SchemaError,
)

__all__ = [
    "CalibrationError",
    "ConsistencyError",
    "GridFileError",
    "InputError",
    "RelaxError",
    "SchemaError",
    "__version__",
]
