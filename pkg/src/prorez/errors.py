"""Exception hierarchy. Each family maps onto one CLI exit code."""


class ProrezError(Exception):
    exit_code = 1


class UsageError(ProrezError):
    exit_code = 2


class MissingArtifactError(ProrezError):
    exit_code = 3


class StaleArtifactError(MissingArtifactError):
    pass


class ValidationError(ProrezError, ValueError):
    exit_code = 4


class ShapeError(ValidationError):
    pass


class SurgeryError(ShapeError):
    pass


class LeakageError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeTableMismatchError(CheckpointError):
    pass


class NumericError(ProrezError, ArithmeticError):
    exit_code = 5


class DivergenceError(NumericError):
    pass


class UndefinedMetricError(NumericError):
    pass
