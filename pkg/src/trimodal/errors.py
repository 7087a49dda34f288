"""Exception hierarchy shared by every subsystem."""


class TrimodalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TrimodalError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(TrimodalError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ContractError(TrimodalError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(TrimodalError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(TrimodalError, FloatingPointError):
    """A computation on finite inputs produced NaN or Inf."""


class DataError(TrimodalError, OSError):
    """Missing, unreadable, or malformed data files."""


class CheckpointFormatError(DataError):
    """Malformed checkpoint file.

    Parameters
    ----------
    message : str
        Human-readable description.
    offset : int
        Byte offset at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
