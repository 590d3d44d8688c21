class CapeError(Exception):
    """Base class for all package errors."""


class ConfigError(CapeError, ValueError):
    pass


class UsageError(CapeError, ValueError):
    pass


class StructuralError(CapeError, ValueError):
    """Shapes or sizes that do not fit together."""


class LoadError(CapeError, IOError):
    """A persisted file is corrupted or does not match what was expected."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class GenerationError(CapeError, RuntimeError):
    pass
