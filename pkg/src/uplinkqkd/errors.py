"""Exception types shared across the package."""


class UplinkQkdError(Exception):
    """Base class for all package-specific errors."""


class DomainError(UplinkQkdError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ConfigurationError(UplinkQkdError, ValueError):
    """Inconsistent or infeasible configuration values."""


class SynchronizationError(UplinkQkdError):
    """Coincidence search could not find a confident histogram peak."""


class SelectionExhaustedError(UplinkQkdError):
    """Pass-block selection ran out of usable run data.

    ``pass_second`` identifies the first second of the theoretical pass
    that could not be covered.
    """

    def __init__(self, pass_second: int):
        self.pass_second = pass_second
        super().__init__(f"no unused block with sufficient loss for pass second {pass_second}")


class ParseError(UplinkQkdError, ValueError):
    """Malformed serialized stream; ``offset`` is the failing byte offset."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class ProtocolError(UplinkQkdError):
    """Session state machine violation or integrity failure."""

    def __init__(self, message: str, state: str = ""):
        self.state = state
        super().__init__(f"{message}" + (f" (state {state})" if state else ""))
