"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class RefractaError(Exception):
    """Base class for all package errors."""


class ConfigError(RefractaError):
    """Invalid or missing configuration (bad keys, bad values, bad flags)."""


class DataError(RefractaError):
    """Input data is missing, malformed, or inconsistent."""


class ParseError(DataError):
    """A file could not be parsed.

    Carries the byte offset at which parsing failed and what was expected
    there, so diagnostics can point at the exact spot.
    """

    def __init__(self, path, offset, expected):
        self.path = str(path)
        self.offset = int(offset)
        self.expected = expected
        super().__init__(f"{self.path}: parse error at byte {self.offset}: expected {expected}")


class EmptyHullError(DataError):
    """Silhouette carving produced an empty intersection."""


class NonManifoldError(DataError):
    """Mesh operation requires a watertight manifold input."""


class NumericalError(RefractaError):
    """An iterative numerical procedure failed to converge or degenerated."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
