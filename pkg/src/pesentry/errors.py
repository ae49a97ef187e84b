"""Exception hierarchy shared by every pesentry module."""


class PesentryError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


class EmptyInput(PesentryError, ValueError):
    pass


class ShapeMismatch(PesentryError, ValueError):
    pass


class SchemaMismatch(PesentryError, ValueError):
    pass


class DegenerateLabels(PesentryError, ValueError):
    pass


class SchemaError(PesentryError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientClass(PesentryError, ValueError):
    def __init__(self, class_name: str):
        self.class_name = class_name
        super().__init__(f"no entries available for class {class_name!r}")


class CacheError(PesentryError, ValueError):
    pass


class LengthMismatch(PesentryError, ValueError):
    pass


class UnknownPositiveClass(PesentryError, ValueError):
    pass


class BundleError(PesentryError, ValueError):
    pass
