"""Exception types shared across the package."""


class FSMRError(Exception):
    pass


class ConfigError(FSMRError, ValueError):
    pass


class ShapeError(FSMRError, ValueError):
    pass


class InvalidInputError(FSMRError, ValueError):
    pass


class DegenerateMetricError(FSMRError, ArithmeticError):
    pass


class NumericalError(FSMRError, ArithmeticError):
    pass


class DivergenceError(FSMRError, RuntimeError):
    """Training produced a non-finite loss or an exploding logit."""

    def __init__(self, message, iteration=None, components=None):
        super().__init__(message)
        self.iteration = iteration
        self.components = dict(components or {})
