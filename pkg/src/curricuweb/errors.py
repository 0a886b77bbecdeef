"""Exception hierarchy shared by all modules.

Exit codes used by the CLI: 0 success, 2 config error, 3 data error,
4 transport error.
"""

from __future__ import annotations


class CurricuwebError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CurricuwebError):
    """Invalid configuration: bad parameter values, unknown variants, bad wiring."""

    exit_code = 2


class DataError(CurricuwebError):
    """Invalid or inconsistent data encountered at run time."""

    exit_code = 3


class ParseError(DataError):
    """A line-delimited input file could not be parsed."""


class IntegrityError(DataError):
    """A uniqueness or cross-reference invariant was violated."""


class FormatError(DataError):
    """A binary container is malformed (bad magic, truncation, non-finite payload)."""


class ShapeError(DataError):
    """Array dimensions do not match the operation's contract."""


class ScheduleError(DataError):
    """A curriculum stage admits no records or is otherwise unusable."""


class EvaluationError(DataError):
    """Evaluation cannot produce a result (e.g. no class has ground truth)."""


class ProtocolError(DataError):
    """A search-client response does not follow the expected format."""


class TransportError(CurricuwebError):
    """A search-client call failed at the transport level."""

    exit_code = 4

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable
