"""Exception hierarchy shared by every module in the package."""


class ShmSliceError(Exception):
    """Base class for all package errors."""


class GeometryError(ShmSliceError, ValueError):
    pass


class RangeError(ShmSliceError, IndexError):
    """Slice id or byte range outside what the caller may address."""


class ResourceError(ShmSliceError, OSError):
    """The kernel refused to allocate a shared object or doorbell."""


class BadHeader(ShmSliceError):
    """Slice header magic, version or id does not match expectations."""


class MapError(ShmSliceError):
    pass


class ProtocolError(ShmSliceError):
    """A peer violated message ordering or round lockstep."""


class DecodeError(ProtocolError):
    """Bytes on the wire do not form a valid frame or record."""


class ClosedError(ShmSliceError):
    """The peer process holding the other end has gone away."""


class Timeout(ShmSliceError, TimeoutError):
    pass


class SpawnError(ShmSliceError):
    pass


class ProcessGone(ShmSliceError):
    pass
