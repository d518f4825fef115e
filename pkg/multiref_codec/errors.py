"""
Exception hierarchy for multiref_codec.

Every error raised on purpose by the package derives from ``CodecError`` and
from the builtin exception a caller would naturally catch, so
``except ValueError`` keeps working for code that does not know about the
codec types.
"""


class CodecError(Exception):
    """Base class for all codec errors."""


class ShapeError(CodecError, ValueError):
    """A tensor does not have the shape an operation requires."""


class ConfigError(CodecError, ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(CodecError, ValueError):
    """An operation was called in a way its contract forbids."""


class ValidationError(CodecError, ValueError):
    """An input failed a semantic check (e.g. a non-stochastic matrix)."""


class DomainError(CodecError, ValueError):
    """Inputs fall outside the domain where a metric is defined."""


class NumericError(CodecError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class RefinementDivergedError(NumericError):
    """Latent refinement loss grew beyond the divergence limit."""

    def __init__(self, message: str, step: int, loss: float, initial_loss: float):
        super().__init__(message)
        self.step = step
        self.loss = loss
        self.initial_loss = initial_loss


class FormatError(CodecError, ValueError):
    """A bitstream has the wrong magic, version or model."""


class ParseError(FormatError):
    """A bitstream is truncated or has trailing bytes."""


class CodingError(CodecError, RuntimeError):
    """The range coder was given a symbol it cannot represent."""

    def __init__(self, message: str, where: str = "", position: int = -1):
        if where:
            message = f"{message} ({where}, position {position})"
        super().__init__(message)
        self.where = where
        self.position = position


class CheckpointError(CodecError, RuntimeError):
    """A checkpoint cannot be loaded into the requested model."""


class ConformanceError(CodecError, AssertionError):
    """Encoder and decoder disagree on reconstructed latents."""
