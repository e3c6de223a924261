"""Exception types shared across the package."""


class SeatorqueError(Exception):
    """Base class for all package-specific errors."""


class SingularInertiaError(SeatorqueError):
    """Load inertia matrix is numerically singular at the queried configuration."""


class NonFiniteStateError(SeatorqueError):
    """A state vector or derivative contains NaN or infinity."""


class FactorizationError(SeatorqueError):
    """Cholesky factorization failed even after the jitter ladder was exhausted."""


class InnovationSingularError(SeatorqueError):
    """Innovation covariance cannot be factorized during a measurement update."""


class ConfigError(SeatorqueError):
    """Scenario configuration file is missing, malformed, or fails validation."""


class MalformedCsvError(SeatorqueError):
    """A CSV input does not match the documented schema."""
