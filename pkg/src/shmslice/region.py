"""Segmented shared region: slice geometry, slice headers and the two views.

The region is a row of independent shared-memory objects, one per slice.
Slice 0 belongs to the manager; slices 1..N each belong to one worker.  A
worker only ever receives the descriptor of its own slice, so the isolation
boundary is the set of descriptors a process holds.

Every slice starts with a 64-byte little-endian control block::

    0x00 magic "SLC1"   0x04 version u32   0x08 slice_id u32   0x0C flags u32
    0x10 data_seq u64   0x18 done_seq u64  0x20 data_len u64   0x28 result u64
    0x30 target_op u8   0x31 target_arg u8 0x32..0x3F reserved

followed by the payload.
"""

from __future__ import annotations

import errno
import fcntl
import mmap
import os
import sys
from dataclasses import dataclass, field

from .errors import BadHeader, GeometryError, MapError, RangeError, ResourceError

if sys.byteorder != "little":  # header words are accessed in native order
    raise ImportError("shmslice requires a little-endian host")

PAGE = 4096
MIN_SLICE = 8192
HEADER_SIZE = 64
MAGIC = b"SLC1"
VERSION = 1
SHM_DIR = "/dev/shm"

FLAG_TERMINATE = 0x1
OP_COUNT = 0

_MAGIC_U32 = int.from_bytes(MAGIC, "little")

# word indexes into the header views
_W32_MAGIC, _W32_VERSION, _W32_ID, _W32_FLAGS = 0, 1, 2, 3
_W64_DATA_SEQ, _W64_DONE_SEQ, _W64_DATA_LEN, _W64_RESULT = 2, 3, 4, 5
_B_TARGET_OP, _B_TARGET_ARG = 0x30, 0x31


@dataclass(frozen=True)
class RegionConfig:
    total_size: int
    num_workers: int
    persist: bool = False
    region_name: str = "shmslice"

    def __post_init__(self):
        if self.total_size <= 0:
            raise GeometryError(f"total_size must be positive, got {self.total_size}")
        if self.num_workers < 1:
            raise GeometryError(f"num_workers must be >= 1, got {self.num_workers}")
        if self.persist and ("/" in self.region_name or not self.region_name):
            raise ValueError(f"bad region name {self.region_name!r}")


@dataclass(frozen=True)
class SliceGeometry:
    total_size: int
    num_slices: int
    slice_size: int

    @property
    def num_workers(self) -> int:
        return self.num_slices - 1

    @property
    def payload_capacity(self) -> int:
        return self.slice_size - HEADER_SIZE


def compute_geometry(total_size: int, num_workers: int) -> SliceGeometry:
    """Split ``total_size`` into ``num_workers + 1`` equal page-aligned slices.

    The manager counts as a slice holder, hence the ``+ 1``.  Raises
    :class:`GeometryError` if the resulting slice is under 8 KiB.
    """
    if total_size <= 0 or num_workers < 1:
        raise GeometryError(f"invalid region: total={total_size} workers={num_workers}")
    num_slices = num_workers + 1
    slice_size = (total_size // num_slices) // PAGE * PAGE
    if slice_size < MIN_SLICE:
        raise GeometryError(
            f"slice size {slice_size} < {MIN_SLICE} for total={total_size} with {num_slices} slices"
        )
    return SliceGeometry(total_size, num_slices, slice_size)


def slice_offset(geometry: SliceGeometry, slice_id: int) -> int:
    """Logical start of ``slice_id`` within the region (base address 0)."""
    if not 0 <= slice_id < geometry.num_slices:
        raise RangeError(f"slice id {slice_id} outside 0..{geometry.num_slices - 1}")
    return slice_id * geometry.slice_size


class SliceMap:
    """One mapped slice object with typed access to its header words."""

    def __init__(self, fd: int, size: int):
        self.fd = fd
        self.size = size
        try:
            self._mm = mmap.mmap(fd, size, mmap.MAP_SHARED, mmap.PROT_READ | mmap.PROT_WRITE)
        except (OSError, ValueError) as exc:
            raise MapError(f"cannot map slice fd {fd} ({size} bytes): {exc}") from exc
        self.buf = memoryview(self._mm)
        hdr = self.buf[:HEADER_SIZE]
        self._hdr = hdr
        self._h32 = hdr.cast("I")
        self._h64 = hdr.cast("Q")
        self._h8 = hdr.cast("B")

    # header accessors; aligned word stores keep each counter update atomic
    @property
    def magic(self) -> bytes:
        return bytes(self._hdr[0:4])

    @property
    def version(self) -> int:
        return self._h32[_W32_VERSION]

    @property
    def slice_id(self) -> int:
        return self._h32[_W32_ID]

    @property
    def flags(self) -> int:
        return self._h32[_W32_FLAGS]

    @flags.setter
    def flags(self, value: int) -> None:
        self._h32[_W32_FLAGS] = value

    @property
    def data_seq(self) -> int:
        return self._h64[_W64_DATA_SEQ]

    @data_seq.setter
    def data_seq(self, value: int) -> None:
        self._h64[_W64_DATA_SEQ] = value

    @property
    def done_seq(self) -> int:
        return self._h64[_W64_DONE_SEQ]

    @done_seq.setter
    def done_seq(self, value: int) -> None:
        self._h64[_W64_DONE_SEQ] = value

    @property
    def data_len(self) -> int:
        return self._h64[_W64_DATA_LEN]

    @data_len.setter
    def data_len(self, value: int) -> None:
        self._h64[_W64_DATA_LEN] = value

    @property
    def result(self) -> int:
        return self._h64[_W64_RESULT]

    @result.setter
    def result(self, value: int) -> None:
        self._h64[_W64_RESULT] = value

    @property
    def target_op(self) -> int:
        return self._h8[_B_TARGET_OP]

    @target_op.setter
    def target_op(self, value: int) -> None:
        self._h8[_B_TARGET_OP] = value

    @property
    def target_arg(self) -> int:
        return self._h8[_B_TARGET_ARG]

    @target_arg.setter
    def target_arg(self, value: int) -> None:
        self._h8[_B_TARGET_ARG] = value

    def init_header(self, slice_id: int) -> None:
        self._hdr[:] = bytes(HEADER_SIZE)
        self._hdr[0:4] = MAGIC
        self._h32[_W32_VERSION] = VERSION
        self._h32[_W32_ID] = slice_id

    def header_bytes(self) -> bytes:
        return bytes(self._hdr)

    @property
    def payload_capacity(self) -> int:
        return self.size - HEADER_SIZE

    def _check_range(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.payload_capacity:
            raise RangeError(
                f"payload range [{offset}, {offset + length}) exceeds capacity {self.payload_capacity}"
            )
        if length == 0 and offset >= self.payload_capacity:
            raise RangeError(f"payload offset {offset} >= capacity {self.payload_capacity}")

    def payload_view(self, offset: int = 0, length: int | None = None) -> memoryview:
        if length is None:
            length = self.payload_capacity - offset
        self._check_range(offset, length)
        start = HEADER_SIZE + offset
        return self.buf[start:start + length]

    def read_payload(self, offset: int, length: int) -> bytes:
        self._check_range(offset, length)
        start = HEADER_SIZE + offset
        return self._mm[start:start + length]

    def write_payload(self, data, offset: int = 0) -> None:
        n = len(data) if not isinstance(data, memoryview) else data.nbytes
        self._check_range(offset, n)
        start = HEADER_SIZE + offset
        self.buf[start:start + n] = data

    def close(self) -> None:
        if self._mm is None:
            return
        for view in (self._h8, self._h64, self._h32, self._hdr, self.buf):
            view.release()
        self._mm.close()
        self._mm = None


def _slice_path(region_name: str, slice_id: int) -> str:
    return os.path.join(SHM_DIR, f"{region_name}.{slice_id}")


def _new_anonymous(slice_id: int, size: int) -> int:
    try:
        fd = os.memfd_create(f"slice.{slice_id}", os.MFD_CLOEXEC | os.MFD_ALLOW_SEALING)
        os.ftruncate(fd, size)
    except OSError as exc:
        raise ResourceError(exc.errno, f"memfd for slice {slice_id}: {exc.strerror}") from exc
    # a worker must not be able to shrink its slice under the manager's mapping
    fcntl.fcntl(fd, fcntl.F_ADD_SEALS, fcntl.F_SEAL_SHRINK | fcntl.F_SEAL_GROW | fcntl.F_SEAL_SEAL)
    return fd


def _new_named(path: str, size: int) -> int:
    try:
        os.unlink(path)
    except FileNotFoundError:
        pass
    try:
        fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
        os.ftruncate(fd, size)
    except OSError as exc:
        raise ResourceError(exc.errno, f"{path}: {exc.strerror}") from exc
    return fd


@dataclass
class ManagerRegion:
    geometry: SliceGeometry
    slices: list[SliceMap]
    persist: bool = False
    names: list[str] = field(default_factory=list)

    @property
    def descriptors(self) -> list[int]:
        return [s.fd for s in self.slices]

    def slice(self, slice_id: int) -> SliceMap:
        if not 0 <= slice_id < len(self.slices):
            raise RangeError(f"slice id {slice_id} outside 0..{len(self.slices) - 1}")
        return self.slices[slice_id]

    def close(self) -> None:
        """Unmap and close every slice.  Named objects stay behind."""
        for s in self.slices:
            s.close()
            try:
                os.close(s.fd)
            except OSError:
                pass
        self.slices = []

    def destroy(self) -> None:
        self.close()
        for path in self.names:
            try:
                os.unlink(path)
            except FileNotFoundError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def create_region(config: RegionConfig) -> ManagerRegion:
    geometry = compute_geometry(config.total_size, config.num_workers)
    slices: list[SliceMap] = []
    names: list[str] = []
    try:
        for i in range(geometry.num_slices):
            if config.persist:
                path = _slice_path(config.region_name, i)
                fd = _new_named(path, geometry.slice_size)
                names.append(path)
            else:
                fd = _new_anonymous(i, geometry.slice_size)
            try:
                s = SliceMap(fd, geometry.slice_size)
            except MapError:
                os.close(fd)
                raise
            s.init_header(i)
            slices.append(s)
    except BaseException:
        ManagerRegion(geometry, slices, config.persist, names).destroy()
        raise
    return ManagerRegion(geometry, slices, config.persist, names)


def reopen_region(region_name: str, total_size: int, num_workers: int) -> ManagerRegion:
    """Map an existing persisted region without resetting it.

    This is the restart path: a new manager picks up the slices, and whatever
    the workers left in them, from a previous manager.
    """
    geometry = compute_geometry(total_size, num_workers)
    slices = []
    names = []
    try:
        for i in range(geometry.num_slices):
            path = _slice_path(region_name, i)
            try:
                fd = os.open(path, os.O_RDWR)
            except OSError as exc:
                raise MapError(f"{path}: {exc.strerror}") from exc
            names.append(path)
            if os.fstat(fd).st_size != geometry.slice_size:
                os.close(fd)
                raise MapError(f"{path} is not {geometry.slice_size} bytes")
            s = SliceMap(fd, geometry.slice_size)
            slices.append(s)
            _validate(s, i)
    except BaseException:
        ManagerRegion(geometry, slices, True, names).close()
        raise
    return ManagerRegion(geometry, slices, True, names)


def _validate(s: SliceMap, expected_id: int) -> None:
    if s.magic != MAGIC:
        raise BadHeader(f"bad magic {s.magic!r}")
    if s.version != VERSION:
        raise BadHeader(f"unsupported header version {s.version}")
    if s.slice_id != expected_id:
        raise BadHeader(f"slice id {s.slice_id} != expected {expected_id}")


@dataclass
class WorkerSlice:
    """A worker's view: exactly one slice object, nothing else."""

    slice_id: int
    slice_size: int
    map: SliceMap

    @property
    def payload_capacity(self) -> int:
        return self.slice_size - HEADER_SIZE

    def read_payload(self, offset: int, length: int) -> bytes:
        return self.map.read_payload(offset, length)

    def payload_view(self, offset: int = 0, length: int | None = None) -> memoryview:
        return self.map.payload_view(offset, length)

    def close(self) -> None:
        self.map.close()


def attach_slice(descriptor: int, slice_size: int, expected_id: int) -> WorkerSlice:
    """Map a slice received from the manager and check its header.

    Takes ownership of ``descriptor``.  On success it is closed as well: the
    mapping holds its own duplicate, so the worker keeps exactly one
    descriptor for its slice.
    """
    try:
        try:
            size = os.fstat(descriptor).st_size
        except OSError as exc:
            raise MapError(f"fstat slice fd: {exc.strerror}") from exc
        if size < HEADER_SIZE:
            raise MapError(f"slice object holds {size} bytes, cannot contain a header")
        if size != slice_size:
            raise MapError(f"slice object is {size} bytes, expected {slice_size}")
        s = SliceMap(descriptor, slice_size)
    except MapError:
        os.close(descriptor)
        raise
    try:
        _validate(s, expected_id)
    except BadHeader:
        s.close()
        os.close(descriptor)
        raise
    os.close(descriptor)
    s.fd = -1  # only the mapping's internal duplicate remains
    return WorkerSlice(expected_id, slice_size, s)


def write_payload(region: ManagerRegion, slice_id: int, data) -> None:
    if slice_id < 1:
        raise RangeError("slice 0 belongs to the manager and carries no job payload")
    region.slice(slice_id).write_payload(data)


def list_named(region_name: str) -> list[str]:
    """Names under the shared-memory directory that belong to ``region_name``."""
    prefix = region_name + "."
    try:
        return sorted(n for n in os.listdir(SHM_DIR) if n.startswith(prefix))
    except OSError as exc:
        if exc.errno == errno.ENOENT:
            return []
        raise
