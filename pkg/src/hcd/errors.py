"""Exception hierarchy shared by every hcd module.

User errors (bad arguments, bad files, bad configs) map to CLI exit code 1.
`InvariantViolation` marks a bug inside the package and maps to exit code 2.
"""

from typing import Optional, Sequence


class HcdError(Exception):
    """Base class for all errors raised by hcd."""

    exit_code: int = 1


class InvalidArgumentError(HcdError, ValueError):
    """An argument is outside its validity domain (shape, range, divisibility)."""


class ConfigurationError(HcdError):
    """The resolved configuration cannot be used (missing files, bad keys)."""


class ImageIOError(HcdError, OSError):
    """An image file could not be read or written."""

    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path


class ImageFormatError(HcdError):
    """An image has a layout hcd does not handle (e.g. 2 channels)."""


class CheckpointError(HcdError):
    """A checkpoint archive cannot be loaded."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format version."""


class CheckpointIntegrityError(CheckpointError):
    """The checkpoint is truncated, tampered with, or not a checkpoint at all."""


class MetricsParseError(HcdError):
    """A metrics CSV is malformed."""

    def __init__(self, path: str, line: Optional[int], reason: str):
        where = f"{path}:{line}" if line is not None else path
        super().__init__(f"{where}: {reason}")
        self.path = path
        self.line = line


class NonFiniteLossError(HcdError):
    """Training produced a NaN/Inf loss or weight."""

    def __init__(self, step: int, batch_indices: Sequence[int], detail: str):
        indices = ", ".join(str(i) for i in batch_indices) or "none isolated"
        super().__init__(
            f"non-finite value at step {step} ({detail}); offending batch indices: {indices}"
        )
        self.step = step
        self.batch_indices = list(batch_indices)


class InvariantViolation(HcdError):
    """An internal contract was broken. Always a bug in hcd."""

    exit_code = 2
