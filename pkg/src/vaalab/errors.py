"""Exception hierarchy shared by the package."""


class VaaError(Exception):
    """Base class for errors raised by vaalab."""


class LayoutError(VaaError, ValueError):
    """Parameter vector or features do not match the model layout."""


class NumericError(VaaError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``example_id`` names the offending example when known, ``step`` the
    training step when raised from a training loop.
    """

    def __init__(self, message, example_id=None, step=None):
        super().__init__(message)
        self.example_id = example_id
        self.step = step


class PreconditionError(VaaError, ValueError):
    """An argument violates an operation's precondition."""


class DomainError(VaaError, ValueError):
    """Arguments fall outside the domain where the quantity is defined."""


class ConfigError(VaaError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(VaaError, ValueError):
    """Malformed or incompatible file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
