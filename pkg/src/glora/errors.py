"""Exception types shared across the package."""


class GLoRAError(Exception):
    """Base class for all package errors."""


class ShapeError(GLoRAError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(GLoRAError, ValueError):
    """A documented precondition was violated."""


class ConfigurationError(GLoRAError, ValueError):
    """A support kind, rank or model description is invalid."""


class DivergenceError(GLoRAError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class FormatError(GLoRAError):
    """A persisted file does not follow the container layout."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class LengthError(FormatError):
    """Payload is shorter or longer than the manifest declares."""
