"""Exception hierarchy shared by every module.

``UsageError`` covers bad arguments and invalid configuration (CLI exit 1);
everything else derived from ``MaetError`` is a data error (CLI exit 2).
"""

from __future__ import annotations


class MaetError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(MaetError, ValueError):
    """Invalid argument, hyper-parameter or manifest field."""


class FormatError(MaetError):
    """A checkpoint, mask or report file violates its on-disk format."""


class EncodeError(MaetError):
    """A value cannot be represented in the requested dtype."""


class AlignmentError(MaetError):
    """Two or more stores do not share the same tensor names and shapes."""


class NonFiniteError(MaetError):
    """A NaN or infinity was encountered in tensor data."""

    def __init__(self, name: str, index: int, what: str = "value"):
        self.name = name
        self.index = index
        super().__init__(f"non-finite {what} in tensor {name!r} at flat index {index}")


class DegenerateError(MaetError):
    """An operation is undefined for its input, e.g. cosine of a zero vector."""


class StageError(MaetError):
    """A pipeline stage failed; wraps the underlying cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
