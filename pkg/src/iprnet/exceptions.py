"""Exception and warning types raised across the package."""


class IPRNetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IPRNetError, ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class SamplingError(IPRNetError, RuntimeError):
    """An episode cannot be drawn from the available items."""

    def __init__(self, class_id, message):
        self.class_id = class_id
        super().__init__(f"class {class_id}: {message}")


class ShapeError(IPRNetError, ValueError):
    pass


class DomainError(IPRNetError, ValueError):
    pass


class NumericError(IPRNetError, ArithmeticError):
    """A non-finite value reached a loss combination."""

    def __init__(self, term, value):
        self.term = term
        super().__init__(f"non-finite value for {term}: {value}")


class EmptyRegionError(IPRNetError, ValueError):
    """No feature positions carry the requested class."""


class DegenerateVectorError(IPRNetError, ValueError):
    pass


class CheckpointMismatchError(IPRNetError, ValueError):
    pass


class IPRNetDiagnostic(UserWarning):
    """Non-fatal condition worth surfacing (empty selections, skipped episodes)."""
