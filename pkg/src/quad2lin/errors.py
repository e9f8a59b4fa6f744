"""Exception types shared across the package."""


class Quad2LinError(Exception):
    """Base class for all package errors."""


class DimensionError(Quad2LinError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(Quad2LinError, RuntimeError):
    """A precondition of an operation was violated."""


class NumericError(Quad2LinError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class ConfigError(Quad2LinError, ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class CorruptionError(Quad2LinError, IOError):
    """Checkpoint data failed an integrity check."""


class UnsupportedVersionError(Quad2LinError, IOError):
    """Checkpoint manifest version is not readable by this build."""


class DivergenceError(Quad2LinError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, checkpoint: str | None = None):
        self.checkpoint = checkpoint
        super().__init__(message)
