class SureDenoiseError(Exception):
    exit_code = 1


class ConfigError(SureDenoiseError):
    exit_code = 2


class DataError(SureDenoiseError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    pass


class IdxFormatError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxDimensionError(DataError):
    pass


class PgmFormatError(DataError):
    pass


class GroundTruthUnavailableError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class NumericalError(SureDenoiseError, ArithmeticError):
    exit_code = 4


class TrainingAborted(NumericalError):
    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class ValidationFailure(SureDenoiseError):
    exit_code = 5

    def __init__(self, message, reports=None):
        super().__init__(message)
        self.reports = reports or []


class GradientError(SureDenoiseError):
    pass


class EstimatorVarianceWarning(UserWarning):
    """Raised through ``warnings.warn`` when a risk estimate is known to be unreliable."""
