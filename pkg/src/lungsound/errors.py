"""Shared exception types."""


class LungsoundError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LungsoundError, ValueError):
    """A value passed to an operation violates its preconditions."""


class InvalidConfigError(LungsoundError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DataError(LungsoundError, ValueError):
    """Dataset contents (labels, annotations) are malformed."""


class FormatError(LungsoundError, ValueError):
    """An on-disk artifact (wav, cache, checkpoint) is malformed."""


class UsageError(LungsoundError, RuntimeError):
    """An API was called in an unsupported order."""
