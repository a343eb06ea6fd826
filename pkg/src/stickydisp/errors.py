"""Exception hierarchy shared by every module."""


class StickyDispError(Exception):
    """Base class for all package errors."""


class DomainError(StickyDispError, ValueError):
    """A parameter or input lies outside the domain of the operation."""


class DimensionError(StickyDispError, ValueError):
    """Vector length does not match the truncation level."""


class TruncationError(StickyDispError, ValueError):
    """The truncation level discards more tail mass than allowed.

    Attributes
    ----------
    tail_mass : float
        Mass that would be discarded.
    required_n_max : int
        Smallest truncation level meeting the tail threshold.
    """

    def __init__(self, message, tail_mass, required_n_max):
        super().__init__(message)
        self.tail_mass = tail_mass
        self.required_n_max = required_n_max


class ConvergenceError(StickyDispError, RuntimeError):
    """An iterative method failed to converge; carries the last residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class IntegrationError(StickyDispError, RuntimeError):
    """The time integrator produced NaN or a negative overshoot."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


class ConfigError(StickyDispError, ValueError):
    """Invalid run configuration."""


class Absorbed(StickyDispError):
    """The particle system reached a state with zero total jump rate."""


class InvariantError(StickyDispError, AssertionError):
    """A conserved quantity of the particle system was violated."""
