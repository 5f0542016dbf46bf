"""
Error Types
Exception hierarchy shared by every module of the streaming engine.

The value-style errors subclass ValueError and the state-style errors subclass
RuntimeError, so callers that only know the builtin types keep working.
"""

from typing import Optional


class StreamDiffusionError(Exception):
    """Base class for all errors raised by the engine."""

    kind = "StreamDiffusionError"


class DimensionError(StreamDiffusionError, ValueError):
    """Tensor extents do not agree."""

    kind = "DimensionError"


class ParameterError(StreamDiffusionError, ValueError):
    """A configuration value or argument is outside its valid range."""

    kind = "ParameterError"


class DomainError(StreamDiffusionError, ValueError):
    """A numeric operation was asked to work outside its domain."""

    kind = "DomainError"


class StateError(StreamDiffusionError, RuntimeError):
    """An operation was called in the wrong phase or state."""

    kind = "StateError"


class ConsistencyError(StreamDiffusionError, RuntimeError):
    """Cache bookkeeping and attention mask disagree."""

    kind = "ConsistencyError"


class FormatError(StreamDiffusionError, ValueError):
    """
    A container, weight file or config file is malformed.

    Args:
        message: What is wrong
        offset: Byte offset of the offending field
    """

    kind = "FormatError"

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
