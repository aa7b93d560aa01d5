"""Exception types shared across the package."""


class DuodetError(Exception):
    """Base class for errors raised by this package."""


class UsageError(DuodetError):
    """Bad command-line arguments or configuration."""


class ConditionError(UsageError):
    """A test-condition string does not match the condition grammar."""


class DatasetError(DuodetError):
    """A dataset directory is missing, incomplete, or malformed."""


class CheckpointError(DuodetError):
    """A parameter file does not match the expected architecture."""


class NumericError(DuodetError):
    """A non-finite value surfaced where training must stop."""
