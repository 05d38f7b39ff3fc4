class GviError(Exception):
    """Base class for all errors raised by this package."""


class InvalidMdp(GviError, ValueError):
    pass


class InvalidPolicy(GviError, ValueError):
    pass


class AbsoluteContinuityViolation(GviError, ValueError):
    pass


class DegenerateTemperature(GviError, ValueError):
    pass


class NonConvergence(GviError, RuntimeError):
    pass


class UnreachableGoal(GviError, RuntimeError):
    pass


class InvalidAction(GviError, ValueError):
    pass


class MismatchedSchedule(GviError, ValueError):
    pass


class ShapeMismatch(GviError, ValueError):
    pass


class TrainingDiverged(GviError, FloatingPointError):
    pass


class ConfigError(GviError, ValueError):
    pass


class TraceFileError(GviError, ValueError):
    pass
