"""Exception types shared across the package."""


class LerayAlphaError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(LerayAlphaError, ValueError):
    """An argument is outside the mathematical domain of the operation
    (zero wavevector, negative time step, sigma=0 where a measure change
    is requested, ...)."""


class ConsistencyError(LerayAlphaError, RuntimeError):
    """An internal invariant failed at runtime: non-finite state during
    integration, residual imaginary part in a physical-space evaluation,
    a field that lost incompressibility beyond tolerance."""


class ConfigError(LerayAlphaError, ValueError):
    """A configuration file or observable spec could not be parsed or
    failed validation."""
