"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError and
subclasses exit 2, NumericError exits 3.
"""


class UdcError(Exception):
    """Base class for all package errors."""


class DataError(UdcError):
    """Bad or missing input data: files, formats, dataset layout."""


class UdctFormatError(DataError):
    """Malformed UDCT tensor file. ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(DataError):
    """Invalid run configuration. ``line`` is the 1-based source line, if known."""

    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class NumericError(UdcError):
    """Non-finite values or failed numeric verification."""
