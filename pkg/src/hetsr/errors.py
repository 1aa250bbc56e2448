"""Shared exception hierarchy.

Every error the library raises deliberately derives from :class:`HetSRError`,
so callers (and the CLI) can separate our failures from genuine bugs.
"""


class HetSRError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HetSRError):
    """Operands have incompatible shapes; the message names both."""


class GraphError(HetSRError):
    """Misuse of the autodiff graph (non-scalar backward, reused graph)."""


class ConfigError(HetSRError):
    """Invalid or inconsistent run configuration."""


class DataError(HetSRError):
    """Dataset / image I/O failure (missing file, unsupported format)."""
