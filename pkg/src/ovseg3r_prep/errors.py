"""Exception hierarchy for ovseg3r-prep.

Validation problems subclass ``ValueError`` and internal failures subclass
``RuntimeError`` so callers that only know the builtins still catch them.
The CLI maps the first family to exit code 2 and everything else to 3.
"""

from __future__ import annotations


class Ovseg3rError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(Ovseg3rError, ValueError):
    """Input violates a documented type invariant or precondition."""


class FormatError(ValidationError):
    """A binary artifact is malformed.

    Attributes:
        fmt: Four-letter format name (``"OV3C"``, ``"PLY"``...).
        offset: Byte offset at which the problem was detected.
    """

    def __init__(self, fmt: str, offset: int, message: str) -> None:
        self.fmt = fmt
        self.offset = offset
        self.detail = message
        super().__init__(f"{fmt} at byte offset {offset}: {message}")


class InvariantError(Ovseg3rError, RuntimeError):
    """An internal invariant failed (a bug, or an oracle mismatch)."""


class StageError(Ovseg3rError, RuntimeError):
    """A pipeline stage failed.

    Attributes:
        stage: Name of the failing stage.
    """

    def __init__(self, stage: str, message: str) -> None:
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {message}")
