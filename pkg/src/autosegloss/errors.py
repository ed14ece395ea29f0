"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent settings."""


class ParseError(ValueError):
    """Malformed on-disk artifact. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """Non-finite value encountered; ``context`` carries where it happened."""

    def __init__(self, message, **context):
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.context = context
