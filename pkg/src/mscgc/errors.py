"""Exception types shared across the package."""


class MscgcError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MscgcError, ValueError):
    """Shapes are incompatible for the requested operation."""


class ValidationError(MscgcError, ValueError):
    """Input values violate an operation's preconditions."""


class UsageError(MscgcError, RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""


class ConfigError(MscgcError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(MscgcError, ArithmeticError):
    """Non-finite values encountered where finite math is required."""


class FormatError(MscgcError, ValueError):
    """Malformed or truncated file content."""


class CompatibilityError(FormatError):
    """Persisted state does not match the receiving object's configuration."""


class UndefinedMetricError(MscgcError, ValueError):
    """Metric is mathematically undefined for the given inputs."""


class VerificationError(MscgcError, RuntimeError):
    """A self-verification check (e.g. gradient check) could not be completed."""
