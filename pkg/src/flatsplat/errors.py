"""Exception types shared across the package."""


class FlatsplatError(Exception):
    """Base class for all package errors."""


class ShapeError(FlatsplatError, ValueError):
    """Operand shapes are incompatible."""


class NumericsError(FlatsplatError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, block_id=None):
        super().__init__(message)
        self.block_id = block_id


class ContractError(FlatsplatError, ValueError):
    """A caller violated a documented precondition."""


class PartitionError(FlatsplatError, ValueError):
    """The block partition is inconsistent (empty block, overlapping cores)."""


class ConfigError(FlatsplatError, ValueError):
    """A configuration document failed validation."""


class IoError(FlatsplatError, OSError):
    """A required file is missing or an output location is not writable."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)
