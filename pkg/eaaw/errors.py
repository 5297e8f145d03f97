"""
Exception hierarchy for the EaaW library.

Every error kind derives from EaawError and from the closest builtin, so
callers can catch either.  Library code raises these; only cli.py turns them
into messages and exit codes.
"""

from __future__ import annotations


class EaawError(Exception):
    """Base class for all library errors."""


class DimensionError(EaawError, ValueError):
    """Shapes or lengths do not conform."""


class ConfigError(EaawError, ValueError):
    """Invalid configuration value or combination."""


class DataError(EaawError, ValueError):
    """Empty or otherwise unusable dataset."""


class CodecError(EaawError, ValueError):
    """A watermark payload could not be encoded or decoded."""


class InvariantError(EaawError, ValueError):
    """A domain-type invariant does not hold."""


class IndexRangeError(EaawError, IndexError):
    """Class label, token id or position out of range."""


class GraphStateError(EaawError, RuntimeError):
    """Computation graph used in the wrong order (e.g. backward before forward)."""


class NumericalError(EaawError, ArithmeticError):
    """Singular system, non-finite value, or similar numerical failure."""


class DivergenceError(NumericalError):
    """An optimisation loop produced a non-finite loss term."""

    def __init__(self, term: str, step: int, value: float) -> None:
        super().__init__(f"non-finite {term} ({value}) at step {step}")
        self.term = term
        self.step = step
        self.value = value


class FormatError(EaawError, ValueError):
    """Malformed binary file or CSV; carries the byte offset or line number."""

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None) -> None:
        where = ""
        if offset is not None:
            where = f" (at byte offset {offset})"
        elif line is not None:
            where = f" (at line {line})"
        super().__init__(message + where)
        self.offset = offset
        self.line = line


class PathError(EaawError, FileNotFoundError):
    """A referenced artifact does not exist."""
