"""Exception classes shared across the package.

Data problems (bad inputs, domain violations) and numerical problems
(singular or ill-conditioned systems) are kept distinct so the CLI can map
them to different exit codes.
"""


class DataValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericalError(RuntimeError):
    """Raised when a linear system is singular or too ill-conditioned."""
