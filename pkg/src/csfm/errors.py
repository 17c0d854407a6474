"""Exception hierarchy shared by every csfm module."""


class CSFMError(Exception):
    """Base class for all csfm errors."""


class ConfigError(CSFMError, ValueError):
    """Invalid configuration values or combinations."""


class ContractError(CSFMError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes or axes are incompatible."""


class VocabularyError(CSFMError, KeyError):
    """A channel kind is unknown or absent from a vocabulary."""

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class MissingChannelError(VocabularyError):
    """A requested channel is not present in a record."""


class DataError(CSFMError):
    """Input data is unusable (malformed files, too few examples, ...)."""


class ParseError(DataError):
    """A binary file could not be parsed."""


class BadMagicError(ParseError):
    pass


class VersionMismatchError(ParseError):
    pass


class TruncatedDataError(ParseError):
    pass


class DuplicateChannelError(ParseError):
    pass


class UndefinedMetricError(DataError):
    """The metric is undefined for the given inputs (e.g. a single class)."""


class NumericError(CSFMError, ArithmeticError):
    """A forward op produced NaN or Inf."""

    def __init__(self, message, op=None, step=None):
        super().__init__(message)
        self.op = op
        self.step = step
