"""Exception hierarchy shared across the package."""


class HoseqError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HoseqError):
    """Shape or rank of an input does not match the operation's contract."""


class ConfigError(HoseqError):
    """Invalid hyperparameter, option, or configuration key."""


class DataError(HoseqError):
    """Input data violates an invariant (non-finite values, bad lengths,
    labels out of range, mismatched sequence lengths)."""


class FormatError(DataError):
    """A file does not conform to the expected binary layout."""


class TruncationError(FormatError):
    """A file's length disagrees with what its header implies."""


class NumericError(HoseqError):
    """A computation produced or received non-finite values."""


class UsageError(HoseqError):
    """An API was called out of order or with inconsistent state
    (e.g. backward without a matching forward cache)."""


class UndefinedMetricError(DataError):
    """A metric is mathematically undefined for the given inputs."""
