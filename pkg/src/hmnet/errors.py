"""Exception types shared across the package."""


class HmnetError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(HmnetError):
    """Malformed event file. Carries the offending record index when known."""

    def __init__(self, message: str, record: int | None = None):
        self.record = record
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)


class ShapeError(HmnetError):
    """Operands do not conform (dims, strides, or grid mismatch)."""


class ConfigError(HmnetError):
    """Invalid run or model configuration."""


class StaleMessageError(HmnetError):
    """A down-write message was applied to a state that changed since the
    message was generated."""
