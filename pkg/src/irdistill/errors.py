"""Exception hierarchy shared across the package."""


class IrDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(IrDistillError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigurationError(IrDistillError, ValueError):
    """A parameter or setting is outside its allowed range."""


class ContractError(IrDistillError, ValueError):
    """A caller violated an operation's precondition."""


class NonFiniteError(IrDistillError, ArithmeticError):
    """A primitive produced NaN or Inf."""


class FormatError(IrDistillError, ValueError):
    """A file on disk is malformed.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class CompletenessError(IrDistillError, ValueError):
    """A mapping is missing required keys; ``missing`` lists them."""

    def __init__(self, message: str, missing=()):
        self.missing = sorted(missing)
        if self.missing:
            message = f"{message}: {', '.join(self.missing)}"
        super().__init__(message)


class GenerationError(IrDistillError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""
