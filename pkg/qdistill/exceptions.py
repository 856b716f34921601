"""Error hierarchy for qdistill.

Every error derives from ValueError so callers that only know about
ValueError keep working.
"""
from typing import Optional


class QDistillError(ValueError):
    """Base class for all qdistill errors."""


class ConfigurationError(QDistillError):
    """Invalid or inconsistent configuration."""


class ShapeError(QDistillError):
    """Tensor shapes do not fit an operation."""


class DimensionError(ShapeError):
    """Inner dimensions of a product disagree."""


class NumericError(QDistillError):
    """NaN or non-finite values where finite values are required."""


class StructureError(QDistillError):
    """A layer graph does not have the expected structure."""


class InvariantError(QDistillError):
    """A type invariant is violated."""


class QuantizationError(QDistillError):
    """Quantization parameters cannot be derived."""


class RequantizationError(QuantizationError):
    """The real requantization multiplier is out of contract."""


class ConversionError(QDistillError):
    """A model cannot be converted to its integer form."""


class ModelIntegrityError(QDistillError):
    """A quantized layer chain is inconsistent."""


class MetricsError(QDistillError):
    """A metric cannot be computed from the given predictions."""


class _OffsetError(QDistillError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ModelFormatError(_OffsetError):
    """A model file is malformed."""


class DataFormatError(_OffsetError):
    """A dataset file is malformed."""
