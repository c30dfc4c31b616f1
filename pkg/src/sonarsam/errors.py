"""Exception types shared across the package.

Each category maps onto a CLI exit code (see :mod:`sonarsam.cli`).
"""


class SonarSamError(Exception):
    """Base class for all package errors."""


class ShapeError(SonarSamError, ValueError):
    """Operand extents are incompatible."""


class UsageError(SonarSamError, ValueError):
    """An API was called outside its contract (empty prompts, non-scalar loss, ...)."""


class ConfigurationError(SonarSamError, ValueError):
    """Model, adapter, plan or training configuration is inconsistent."""


class ValidationError(SonarSamError, ValueError):
    """Input values are out of range (boxes outside the image, bad class ids)."""


class ParseError(ConfigurationError):
    """A config file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class IngestionError(SonarSamError, OSError):
    """A dataset on disk does not follow the expected layout."""


class FreezeContractError(SonarSamError, RuntimeError):
    """A trainable parameter received no gradient, or a frozen one did."""
