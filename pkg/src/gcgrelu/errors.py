"""Exception hierarchy shared by every module of the package."""


class GCGReluError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GCGReluError, ValueError):
    """Tensor shapes do not fit together."""


class ConfigError(GCGReluError, ValueError):
    """An invalid configuration value (batch size, learning rate, ...)."""


class DataError(GCGReluError, ValueError):
    """Bad values inside otherwise well-formed data, e.g. an out-of-range label."""


class StateError(GCGReluError, RuntimeError):
    """An object is used out of order, e.g. backward with a stale cache."""


class NumericalError(GCGReluError, ArithmeticError):
    """A non-finite value appeared during training or evaluation."""


class OracleError(NumericalError):
    """The finite-difference oracle probed a non-finite loss."""


class SamplerError(GCGReluError, RuntimeError):
    """No valid sample point could be found within the attempt budget."""


class IngestionError(GCGReluError, IOError):
    """Base class for dataset and checkpoint reading failures."""


class BadMagicError(IngestionError):
    pass


class TruncatedFileError(IngestionError):
    pass


class CountMismatchError(IngestionError):
    pass


class CheckpointFormatError(IngestionError):
    pass
