"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TwinAceError(Exception):
    """Base class for all errors raised by twinace."""


class SchemaError(TwinAceError):
    """A required column is missing from an input file."""

    def __init__(self, column: str, path: str | None = None):
        self.column = column
        where = f" in {path}" if path else ""
        super().__init__(f"missing column {column!r}{where}")


class ParseError(TwinAceError):
    """A cell could not be parsed. ``row`` is the 1-based data row number."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class InsufficientDataError(TwinAceError):
    pass


class SingularityError(TwinAceError):
    """A linear system or design matrix is (numerically) singular."""

    def __init__(self, message: str, condition: float | None = None, columns=()):
        self.condition = condition
        self.columns = tuple(columns)
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3g})"
        super().__init__(message)


class DegenerateDataError(TwinAceError):
    pass


class DomainError(TwinAceError):
    """A link inverse left the admissible range of a variance or correlation."""


class ConfigError(TwinAceError):
    pass


class SamplingError(TwinAceError):
    pass


class UsageError(TwinAceError):
    pass
