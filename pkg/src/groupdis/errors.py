"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
numerical failures (NaN, thinning bound violations) exit 2, I/O errors exit 3.
"""


class GroupdisError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GroupdisError):
    """Invalid parameters, scenario files, or incompatible call arguments."""


class DomainError(GroupdisError):
    """Arguments outside a function's mathematical domain (bad state pair, h < -1, ...)."""


class NumericalError(GroupdisError):
    """A computation produced NaN/inf or otherwise left its validity envelope."""


class RateBoundError(NumericalError):
    """A hazard evaluation exceeded its declared bound, invalidating thinning."""


class FingerprintError(ConfigurationError):
    """A mean path was combined with a scenario/grid it was not computed from."""


class DataError(GroupdisError):
    """Malformed or inconsistent observation data."""
