"""Exception types shared across the package.

Every error carries a short machine-parsable code; the CLI prints it on a
single line so scripts can dispatch on failures without scraping prose.
"""


class RelaxError(Exception):
    """Base error. ``code`` is stable across releases."""

    code = "E_GENERIC"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class InputError(RelaxError, ValueError):
    """Arguments outside a function's documented domain."""

    code = "E_INPUT"


class SchemaError(RelaxError):
    """Malformed input file (CSV/JSON structure, headers, field values)."""

    code = "E_SCHEMA"


class ConsistencyError(RelaxError):
    """Inputs are individually valid but mutually inconsistent."""

    code = "E_CONSISTENCY"


class CalibrationError(RelaxError):
    """Relaxation-coefficient calibration cannot proceed or failed."""

    code = "E_CALIBRATION"


class GridFileError(SchemaError):
    """Experiment grid file failed to parse or validate."""

    code = "E_GRID"
