"""Exception types shared across the package."""


class RetouchError(Exception):
    """Base class for all library errors."""


class ShapeError(RetouchError):
    """Operands have incompatible dimensions."""


class EmptyRegionError(RetouchError):
    """An operation needs at least one set pixel."""


class FileFormatError(RetouchError):
    """Unsupported, malformed or truncated image file."""


class NoMatchingEntityError(RetouchError):
    """The query selected no entity; carries the audit report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BackendError(RetouchError):
    """A model backend call failed."""


class TransportError(BackendError):
    """Connection-level failure talking to a remote backend; retriable."""


class FramingError(BackendError):
    """Wire protocol violation; the connection is unusable."""


class RemoteError(BackendError):
    """Server-side error reported over the wire."""

    def __init__(self, error_type, message):
        super().__init__(f"{error_type}: {message}")
        self.error_type = error_type
        self.remote_message = message
