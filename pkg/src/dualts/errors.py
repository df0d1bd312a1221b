"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`DualTSError` so the CLI
can map families of failures onto distinct exit codes.
"""


class DualTSError(Exception):
    """Base class for all package errors."""

    exit_code = 1


# -- compute layer -----------------------------------------------------------

class ShapeMismatch(DualTSError, ValueError):
    pass


class NonScalarLoss(DualTSError, ValueError):
    pass


class StaleTape(DualTSError, RuntimeError):
    """Backward was requested on a tape that was already consumed or cleared."""


class DegenerateBatch(DualTSError, ValueError):
    pass


class InvalidProbability(DualTSError, ValueError):
    pass


# -- data --------------------------------------------------------------------

class DataError(DualTSError):
    exit_code = 3


class ParseError(DataError, ValueError):
    def __init__(self, row, column, reason):
        self.row, self.column, self.reason = row, column, reason
        super().__init__(f"row {row}, column {column!r}: {reason}")


class EmptyDataset(DataError, ValueError):
    pass


class TooSmall(DataError, ValueError):
    pass


class TooShort(DataError, ValueError):
    pass


class ConfigInvalid(DualTSError, ValueError):
    pass


class UnknownMethod(DualTSError, ValueError):
    pass


class InvalidParam(DualTSError, ValueError):
    pass


class InvalidFraction(DualTSError, ValueError):
    pass


class TooFewRows(DualTSError, ValueError):
    pass


class TooFewEmbeddings(DualTSError, ValueError):
    pass


class InvalidSpec(DataError, ValueError):
    pass


# -- training / numerics -----------------------------------------------------

class NumericError(DualTSError, ArithmeticError):
    exit_code = 4


class NonFiniteGradient(NumericError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class NonFiniteLoss(NumericError):
    pass


# -- checkpoints -------------------------------------------------------------

class CheckpointError(DualTSError):
    exit_code = 5


class IoError(CheckpointError, OSError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptChecksum(CheckpointError):
    pass


# -- evaluation --------------------------------------------------------------

class NotPretrained(DualTSError, RuntimeError):
    pass


class LengthMismatch(DualTSError, ValueError):
    pass


class LabelOutOfRange(DualTSError, ValueError):
    pass


class StatsMismatch(DualTSError, ValueError):
    pass


class NoLabeledSamples(DualTSError, ValueError):
    pass


class TaskMismatch(DualTSError, ValueError):
    exit_code = 6


# -- cli / config ------------------------------------------------------------

class ConfigError(DualTSError, ValueError):
    exit_code = 2

    def __init__(self, key, reason):
        self.key = key
        super().__init__(f"{key}: {reason}")


class MultipleAxes(ConfigError):
    def __init__(self, axes):
        super().__init__("ablation", f"exactly one axis per run, got {sorted(axes)}")
