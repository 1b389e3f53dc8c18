"""Exception hierarchy. The CLI maps these onto exit codes."""


class SSEError(Exception):
    """Base class for all package errors."""


class DataError(SSEError):
    """Malformed or inconsistent input data (manifests, audio, alignments)."""


class FormatError(DataError):
    """A binary or text interchange file does not match its schema."""


class NumericalError(SSEError):
    """Non-finite values or undefined quantities during computation."""
