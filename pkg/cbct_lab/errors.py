"""Exception types raised by the library."""


class CbctError(Exception):
    """Base class for all library errors."""


class GeometryError(CbctError):
    """Degenerate acquisition geometry (parallel rays, off-plane points)."""


class ShapeMismatchError(CbctError, ValueError):
    pass


class ManifestError(CbctError):
    """Schema violation in a geometry manifest or sidecar."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class FileFormatError(CbctError):
    pass


class DivergenceError(CbctError):
    pass


class NonFiniteLossError(CbctError):
    pass
