class MicrosegError(Exception):
    """Base class for every error the engine raises on purpose."""


class DatasetError(MicrosegError):
    """Missing, unreadable or unmatched dataset files, or an empty split."""


class ModelFormatError(MicrosegError):
    """Corrupt, truncated or version-mismatched model file."""


class ShapeMismatchError(MicrosegError, ValueError):
    """Tensor or parameter shapes disagree with the layer graph."""


class PrecisionMismatchError(MicrosegError):
    """A float model was expected and an int8 one was given, or the reverse."""


class NumericDivergenceError(MicrosegError):
    """Loss became NaN or infinite during training."""
