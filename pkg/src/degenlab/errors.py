"""Exception taxonomy shared across the package.

Every contract failure raises one of these, so callers (and the CLI exit-code
mapping) can distinguish bad inputs from runtime breakdowns.
"""


class DegenLabError(Exception):
    """Base class for all package errors."""


class InvalidValue(DegenLabError):
    """A numeric array contains NaN/Inf or otherwise illegal values."""


class ContractViolation(DegenLabError):
    """An operation was called with arguments that break its contract."""


class InvalidToken(DegenLabError):
    """A token id falls outside the model vocabulary."""


class LengthExceeded(DegenLabError):
    """A sequence is longer than the model's position table allows."""


class MissingCount(DegenLabError):
    """A token has no entry in the supplied corpus frequency table."""


class EmptyInput(DegenLabError):
    """An operation that needs at least one element received none."""


class TooShort(DegenLabError):
    """A sequence is shorter than the n-gram order requires."""


class TooFew(DegenLabError):
    """A corpus-level operation needs more sequences than were given."""


class Undefined(DegenLabError):
    """The requested statistic is undefined for this input (degenerate corpus)."""


class Unimplemented(DegenLabError):
    """A named configuration exists but its mechanics are out of scope."""


class DivergenceDetected(DegenLabError):
    """Training loss became non-finite or exploded; the run was aborted."""


class ConfigError(DegenLabError):
    """A run configuration file is malformed or fails validation."""


class DataFormatError(DegenLabError):
    """A dataset file is malformed; message carries the offending line number."""
