"""Exception types shared across the package."""


class CltaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CltaError):
    """Operand shapes do not conform to the operation's algebra."""


class NumericError(CltaError):
    """A value became NaN or infinite."""


class ParameterError(CltaError):
    """An argument value is outside its legal range."""


class ContractError(CltaError):
    """The caller violated an API precondition."""


class DataError(CltaError):
    """A dataset or stream is empty or internally inconsistent."""


class DegenerateBatchError(DataError):
    """A batch is too small for batch-statistics normalization."""


class FormatError(CltaError):
    """A file does not match its declared binary format."""


class ConsistencyError(FormatError):
    """Two related files disagree (e.g. image/label counts)."""


class TruncatedFileError(FormatError):
    """A file ended before its declared payload was complete."""


class StateError(CltaError):
    """Internal state is invalid (e.g. non-positive running variance)."""
