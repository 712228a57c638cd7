"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (bad length, index, range)."""


class CapabilityError(ValueError):
    """The request exceeds what a routine supports (e.g. too many spins)."""


class NumericalFailure(RuntimeError):
    """An iterative solver or root finder did not converge.

    Attributes
    ----------
    residual : float or None
        Last residual norm seen before giving up, when available.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegeneratePathError(ValueError):
    """A tunneling path visits an interior state at (or below) the well energy."""


class InsufficientSamplingError(RuntimeError):
    """Not enough usable samples to form an estimate."""


class ConfigError(ValueError):
    """Malformed experiment configuration; message names the offending field/line."""
