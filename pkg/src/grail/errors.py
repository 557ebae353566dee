"""Exception hierarchy shared by all grail modules."""


class GrailError(Exception):
    """Base class for all errors raised by grail."""


class ShapeError(GrailError):
    """Tensor dimensions are incompatible with the requested operation."""


class ArgumentError(GrailError):
    """A parameter is out of range or structurally invalid."""


class SingularMatrixError(GrailError):
    """A symmetric system was not positive definite after regularization."""


class DegenerateStatisticsError(GrailError):
    """Accumulated statistics carry no usable signal (e.g. all-zero Gram)."""


class FormatError(GrailError):
    """A serialized file is malformed, truncated, or of the wrong type."""
