"""Exception types raised by this package.

Argument errors use the builtin ValueError and I/O failures propagate as
OSError; everything else gets a distinct class so callers can tell a
malformed file from bad data from a numerical failure.
"""


class PartmineError(Exception):
    """Base class for all package-specific errors."""


class FormatError(PartmineError):
    """A file does not match its declared layout (manifest, blob, bank)."""


class ValidationError(PartmineError):
    """Well-formed input that violates a documented invariant."""


class DataError(PartmineError):
    """Data that makes the requested computation meaningless (e.g. a
    category with no positive images)."""


class NumericError(PartmineError):
    """A numerical routine failed to converge or factorize."""


class CapabilityError(PartmineError):
    """The input lacks information the operation needs (e.g. geometry)."""
