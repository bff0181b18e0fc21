"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError -> 1, TrainingError and
SelectionError -> 2, FormatError and OS-level failures -> 3.
"""


class SnapstackError(Exception):
    """Base class for all errors raised by this package."""


class InputError(SnapstackError):
    """Invalid argument, configuration value, or violated precondition."""


class TrainingError(SnapstackError):
    """Training produced a non-finite loss or parameter value."""


class SelectionError(SnapstackError):
    """A snapshot selection matched nothing in the store."""


class FormatError(SnapstackError):
    """Malformed snapshot-store or IDX file."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class BadVersionError(FormatError):
    """File declares an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ends before its declared payload does."""


class CountMismatchError(FormatError):
    """Paired files declare inconsistent record counts."""


class ArchMismatchError(FormatError):
    """Stored parameters do not fit the declared architecture."""
