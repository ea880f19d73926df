"""Exception hierarchy shared across the toolkit.

Every error carries a short machine-readable ``code`` so CLI consumers can
branch on failures without parsing prose.
"""


class ToolkitError(Exception):
    """Base class for all toolkit failures."""

    code = "error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class WbinFormatError(ToolkitError):
    """Checkpoint file is structurally invalid."""

    code = "wbin-format"


class BadMagicError(WbinFormatError):
    code = "wbin-bad-magic"


class TruncatedPayloadError(WbinFormatError):
    code = "wbin-truncated"


class DuplicateTensorError(WbinFormatError):
    code = "wbin-duplicate-tensor"


class ChecksumError(WbinFormatError):
    code = "wbin-checksum"


class ShapeMismatchError(ToolkitError):
    code = "shape-mismatch"


class UndefinedCorrelationError(ToolkitError):
    """Pearson correlation requested on a zero-variance vector."""

    code = "undefined-correlation"


class UnknownLabelError(ToolkitError):
    code = "unknown-label"


class DegradedResultError(ToolkitError):
    """A pipeline stage produced a partial result (CLI exit code 3)."""

    code = "degraded"
