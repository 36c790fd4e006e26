"""Exception types shared across the package."""


class ExoEmbodyError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ExoEmbodyError, ValueError):
    pass


class NotFoundError(ExoEmbodyError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericalFailureError(ExoEmbodyError, ArithmeticError):
    """Mass matrix not positive definite or a similar linear-algebra failure."""


class SimulationDivergedError(ExoEmbodyError, RuntimeError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DegeneratePathError(ExoEmbodyError, ValueError):
    pass


class MuscleBuckledError(ExoEmbodyError, ValueError):
    def __init__(self, message, muscle=None):
        super().__init__(message)
        self.muscle = muscle


class BoundViolationError(InvalidArgumentError):
    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class TrajectoryFormatError(InvalidArgumentError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class StallError(ExoEmbodyError, RuntimeError):
    """Every candidate of a CMA-ES generation returned a non-finite fitness."""


class OptimizationAbortedError(ExoEmbodyError, RuntimeError):
    pass


class LayoutMismatchError(ExoEmbodyError, ValueError):
    """A serialized policy does not match the scenario observation layout."""


class EmptyStateError(ExoEmbodyError, LookupError):
    """Asked for a result before anything was evaluated."""
