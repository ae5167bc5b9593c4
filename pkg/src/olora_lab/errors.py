"""Exception hierarchy shared across the package."""


class LabError(Exception):
    pass


class ShapeError(LabError, ValueError):
    pass


class RankError(LabError, ValueError):
    pass


class NumericError(LabError, ValueError):
    pass


class DivergenceError(NumericError):
    """Loss became non-finite during a forward pass."""


class SizeError(LabError, ValueError):
    pass


class StateError(LabError, RuntimeError):
    pass


class ConfigError(LabError, ValueError):
    pass


class DataError(LabError, ValueError):
    pass


class RunError(LabError, RuntimeError):
    def __init__(self, message, last_finite_step=None):
        super().__init__(message)
        self.last_finite_step = last_finite_step


class CheckpointError(LabError, IOError):
    pass


class FormatError(CheckpointError):
    pass


class CorruptionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass
