"""Exception hierarchy shared by all modules."""


class GLabError(Exception):
    """Base class for every error raised by gbsde_lab."""


class ConfigurationError(GLabError, ValueError):
    """Invalid sizes, violated step/CFL conditions, malformed configs."""

    def __init__(self, message, key_path=None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class ShapeError(GLabError, ValueError):
    """A node function does not live on the level it is used at."""


class DomainError(GLabError, ValueError):
    """An argument lies outside the domain of the operation."""


class ParseError(GLabError, ValueError):
    """Syntax error in a generator expression.

    ``position`` is the 0-based character offset of the offending token.
    """

    def __init__(self, message, position, expected=None):
        self.position = position
        self.expected = expected
        text = f"syntax error at position {position}: {message}"
        if expected:
            text += f" (expected {expected})"
        super().__init__(text)


class GeneratorEvaluationError(GLabError, ArithmeticError):
    """A driver produced a non-finite value; ``point`` holds the inputs."""

    def __init__(self, message, point=None):
        self.point = point
        if point:
            message = f"{message} at {point}"
        super().__init__(message)


class SchemeError(GLabError, RuntimeError):
    """Numerical failure inside a solver (non-convergence, overflow)."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} at {location}"
        super().__init__(message)


class StateOverflowError(SchemeError):
    """Forward state became non-finite."""
