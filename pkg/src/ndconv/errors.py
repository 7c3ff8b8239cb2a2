"""Exception hierarchy shared by every ndconv module."""


class NDConvError(Exception):
    """Base class for all package errors."""


class ShapeError(NDConvError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ContractError(NDConvError, RuntimeError):
    """An operation was called without the state it requires."""


class ConfigError(NDConvError, ValueError):
    """A configuration value is out of its allowed range."""


class NumericalError(NDConvError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class FormatError(NDConvError):
    """A file on disk could not be parsed.

    Carries the offending path and the byte offset where parsing stopped.
    """

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        self.message = message
        super().__init__(f"{self.path}: byte {offset}: {message}")


class AnnotationError(NDConvError, ValueError):
    """A head point lies outside its image."""

    def __init__(self, index, point, size):
        self.index = index
        self.point = tuple(point)
        self.size = tuple(size)
        super().__init__(f"point {index} at {tuple(point)} lies outside image of size (h, w)={tuple(size)}")
