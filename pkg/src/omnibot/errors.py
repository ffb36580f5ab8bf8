"""Exception types shared across the package."""


class OmnibotError(Exception):
    """Base class for all package errors."""


class DimensionError(OmnibotError):
    """Tensor or array shapes are incompatible with an operation."""


class ContractError(OmnibotError):
    """A caller violated an operation's precondition."""


class ConfigError(OmnibotError):
    """Invalid or inconsistent configuration."""


class FormatError(OmnibotError):
    """A binary file does not match its declared format."""


class CorruptionError(FormatError):
    """A binary file ends or breaks mid-record.

    `offset` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateMaskError(ContractError):
    """An attention mask row permits no keys at all."""


class EvaluationError(OmnibotError):
    """A numeric evaluation produced non-finite values."""


class ExecutionError(OmnibotError):
    """An environment was asked to execute an invalid action."""


class CompatibilityError(OmnibotError):
    """Two serialized artifacts (checkpoint vs. config) disagree."""
