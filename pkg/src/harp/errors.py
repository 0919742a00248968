"""Exception hierarchy shared across the toolkit."""


class HarpError(Exception):
    """Base class for all toolkit errors."""


class ContractError(HarpError):
    """An argument violated a documented precondition (shape, range, state)."""


class InputError(ContractError):
    """Bad user-supplied data, e.g. a token id outside the vocabulary."""


class CapacityError(HarpError):
    """A request exceeded a configured limit, e.g. sequence longer than max_seq_len."""


class NumericError(HarpError):
    """A computation produced NaN/Inf where finite values are required."""


class CheckpointError(HarpError):
    """A checkpoint file is unreadable: truncated, inconsistent, or malformed."""


class FormatVersionError(CheckpointError):
    """The checkpoint format version is not supported by this reader."""


class SearchError(HarpError):
    """The rescaling-factor search could not complete for some layer."""
