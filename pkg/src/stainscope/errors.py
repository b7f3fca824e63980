"""Exception hierarchy shared across the package.

Every error that should abort a CLI run carries an ``exit_code`` so the
command layer can translate failures uniformly: 2 for data problems,
3 for numeric problems.  Usage errors (bad flags) are handled by the
argument parser itself and exit with 1.
"""


class StainscopeError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class InvalidInputError(StainscopeError):
    """An argument violates a documented precondition."""


class DataError(StainscopeError):
    """Input files or directories are missing, malformed or inconsistent."""


class ConfigError(DataError):
    """A configuration file or override contains unknown or invalid keys."""


class ManifestError(DataError):
    """A dataset manifest fails validation."""


class CorruptModelError(DataError):
    """A model file has a bad magic, version or truncated payload."""


class EmptySlideError(DataError):
    """No tissue was found on a slide; the result is indeterminate."""


class EmptyBorderError(DataError):
    """A tissue mask has no border pixels to crop patches from."""


class DegenerateLabelsError(DataError):
    """A metric needs both classes but only one is present."""


class StratificationError(DataError):
    """A class has fewer patients than the requested fold count."""


class DegenerateFoldError(DataError):
    """A fold ended up without both classes and cannot be evaluated."""


class PlacementError(DataError):
    """Synthetic geometry could not be placed within its retry budget."""


class NumericError(StainscopeError):
    """A computation failed to converge or produced non-finite values."""

    exit_code = 3
