"""Exception hierarchy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ScheduleError(ValueError):
    """Invalid or degenerate noise schedule."""


class CheckpointError(Exception):
    """Base class for checkpoint/file format problems."""


class CorruptFileError(CheckpointError):
    """File is truncated or its payload cannot be decoded."""


class VersionMismatchError(CheckpointError):
    """Magic bytes or format version do not match what this reader understands."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
