"""Exception types raised across the package."""


class GazeGateError(Exception):
    pass


class NumericDomainError(GazeGateError, ValueError):
    pass


class InsufficientCandidatesError(GazeGateError, ValueError):
    pass


class InsufficientHeadsError(GazeGateError, ValueError):
    pass


class ShapeError(GazeGateError, ValueError):
    pass


class CapacityError(GazeGateError, RuntimeError):
    pass


class ConfigError(GazeGateError, ValueError):
    pass


class UndefinedMetricError(GazeGateError, ValueError):
    pass
