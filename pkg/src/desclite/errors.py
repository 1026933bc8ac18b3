"""Exception hierarchy shared by all desclite modules.

The CLI maps these to stable exit codes: shape/format errors -> 2,
numeric errors -> 3, config errors -> 4 (plain usage errors -> 1).
"""


class DescliteError(Exception):
    """Base class for all errors raised by desclite."""


class ShapeError(DescliteError):
    """Array dimensions or file-declared dimensions do not match."""


class FormatError(DescliteError):
    """A file is not a valid desclite artifact (bad magic, truncation, ...)."""


class NumericError(DescliteError):
    """A numeric routine failed (non-convergence, non-finite values)."""


class ConfigError(DescliteError):
    """A precondition on configuration or input data is violated."""


class StateError(DescliteError):
    """An operation was called in the wrong order (e.g. backward before forward)."""
