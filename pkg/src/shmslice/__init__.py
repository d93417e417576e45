"""Slice-isolated shared-memory data distribution between co-located processes.

A trusted manager process owns a region cut into equal slices.  Each worker
process receives exactly one slice plus a pair of doorbells during a direct
startup handshake, then serves map-reduce rounds through its slice.
"""

from .errors import (
    BadHeader,
    ClosedError,
    DecodeError,
    GeometryError,
    MapError,
    ProcessGone,
    ProtocolError,
    RangeError,
    ResourceError,
    ShmSliceError,
    SpawnError,
    Timeout,
)

__version__ = "0.1.0"
