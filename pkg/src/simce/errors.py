"""Exception types raised by the package."""


class SimceError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SimceError, ValueError):
    """Invalid or inconsistent configuration value.

    ``field`` names the offending configuration key.
    """

    def __init__(self, field, message):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class GeometryError(SimceError, ValueError):
    """Degenerate physical layout (e.g. coincident source and destination)."""


class StructuralError(SimceError, ValueError):
    """Array shapes or layer counts that do not fit together."""


class DegenerateUserError(SimceError, ValueError):
    """A user with zero channel power, for which NMSE is undefined."""


class NumericalError(SimceError, ArithmeticError):
    """Non-finite values or a failed factorization.

    ``iteration`` is set when raised from inside an iterative design and
    ``condition`` carries a condition-number estimate when one is available.
    """

    def __init__(self, message, *, iteration=None, condition=None):
        self.iteration = iteration
        self.condition = condition
        super().__init__(message)
