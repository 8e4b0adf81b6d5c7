"""
Error Types
One exception hierarchy for the whole pipeline, so the CLI and the server can
map failures to exit codes / HTTP statuses by kind rather than by message.
"""

from typing import Optional, Tuple


class PipelineError(Exception):
    """Base class for every error raised by this package"""

    def add_context(self, context: str) -> "PipelineError":
        """Prefix the message in place; the exception keeps its type and attributes"""
        message = self.args[0] if self.args else ""
        self.args = (f"{context}: {message}",) + self.args[1:]
        return self


class ShapeError(PipelineError, ValueError):
    """Tensor or image shapes do not satisfy an operation's contract"""


class DomainError(PipelineError, ValueError):
    """
    A value lies outside the domain of an operation.

    Args:
        message: Human readable description
        index: Offending element index, when one exists
    """

    def __init__(self, message: str, index: Optional[Tuple[int, ...]] = None):
        if index is not None:
            message = f"{message} (at index {index})"
        super().__init__(message)
        self.index = index


class ContractError(PipelineError, ValueError):
    """A caller broke a precondition that is not about shapes or values"""


class NumericError(PipelineError, ArithmeticError):
    """A NaN/Inf appeared during training; `op_name` names the first offender"""

    def __init__(self, message: str, op_name: Optional[str] = None):
        if op_name is not None:
            message = f"{message} (first non-finite op: {op_name})"
        super().__init__(message)
        self.op_name = op_name


class CheckpointError(PipelineError, ValueError):
    """Base class for SRDT checkpoint failures"""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointSpecMismatchError(CheckpointError):
    pass


class PpmError(PipelineError, ValueError):
    """
    Netpbm parse failure.

    Args:
        message: What went wrong
        offset: Byte offset in the file where parsing failed
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class PpmMagicError(PpmError):
    pass


class PpmDimensionError(PpmError):
    pass


class PpmTruncatedError(PpmError):
    pass


class AnnotationError(PipelineError, ValueError):
    pass


class ConfigError(PipelineError, ValueError):
    pass


class GenerationError(PipelineError, RuntimeError):
    pass


class ValidationError(PipelineError, ValueError):
    pass


class UsageError(PipelineError):
    pass
