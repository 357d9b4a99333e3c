"""Exception hierarchy shared by every diffpose module."""


class DiffPoseError(Exception):
    """Base class for all library errors."""

    kind = "error"


class ConfigError(DiffPoseError, ValueError):
    kind = "config"


class ShapeError(DiffPoseError, ValueError):
    kind = "shape"


class StepRangeError(DiffPoseError, IndexError):
    kind = "range"


class OrderingError(DiffPoseError, ValueError):
    kind = "ordering"


class NumericError(DiffPoseError, ArithmeticError):
    kind = "numeric"


class AnnotationError(DiffPoseError, ValueError):
    kind = "parse"


class CropError(DiffPoseError, ValueError):
    kind = "crop"


class GenerationError(DiffPoseError, RuntimeError):
    kind = "generation"
