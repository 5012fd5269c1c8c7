"""Exception types shared across the library and the CLI exit-code mapping."""


class ValidationError(ValueError):
    """Bad inputs: malformed files, broken invariants, infeasible configs."""


class IdentificationError(ValidationError):
    """A coordinate of the shared parameter vector cannot be estimated.

    Attributes:
        coordinates: tuple of offending coordinate indices (0-based).
    """

    def __init__(self, message, coordinates=()):
        super().__init__(message)
        self.coordinates = tuple(coordinates)


class NumericalError(RuntimeError):
    """Numerical failure: optimizer divergence, likelihood underflow."""
