"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration errors -> 2, data and
estimation errors -> 3, numerical errors -> 4.
"""


class CausalZooError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CausalZooError):
    """Invalid configuration: unknown enum value, bad range, bad scheme."""


class InputError(CausalZooError):
    """Invalid data fed to an operation: shape mismatch, out-of-range value."""


class EstimationError(CausalZooError):
    """A treatment-effect or statistic cannot be computed (empty/small groups,
    constant inputs, missing upstream artifacts)."""


class FormatError(CausalZooError):
    """Persisted artifact is corrupt, truncated, or of an unknown version."""


class NumericalError(CausalZooError):
    """Non-finite values where finite ones are required."""
