"""Exception hierarchy shared by every funnelkit module."""


class FunnelError(Exception):
    """Base class for all funnelkit errors."""


class ConfigError(FunnelError, ValueError):
    """Invalid configuration (bad pool factors, mismatched dims, ...)."""


class ShapeError(FunnelError, ValueError):
    """Tensor shapes do not satisfy an operation's precondition."""


class UsageError(FunnelError, RuntimeError):
    """An API was called in the wrong order or with a forbidden option."""


class InputError(FunnelError, ValueError):
    """User data is out of range (token ids, missing files, ...)."""


class ParseError(InputError):
    """Malformed input file. ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
