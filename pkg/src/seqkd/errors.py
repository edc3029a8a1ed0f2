"""Exception hierarchy shared across the package."""


class SeqKDError(Exception):
    """Base class for all errors raised by seqkd."""

    kind = "error"


class ShapeError(SeqKDError, ValueError):
    kind = "shape"


class ParameterError(SeqKDError, ValueError):
    kind = "parameter"


class DataError(SeqKDError, ValueError):
    kind = "data"


class ContractError(SeqKDError, ValueError):
    """A precondition of an operation was violated by the caller."""

    kind = "contract"


class LoadError(SeqKDError):
    kind = "load"


class TrainingError(SeqKDError, ArithmeticError):
    kind = "training"


class ConfigurationError(SeqKDError, ValueError):
    kind = "configuration"


class RequestError(SeqKDError, ValueError):
    """Invalid recommendation request (maps to HTTP 422)."""

    kind = "request"
