"""Introspect which shared-memory objects and doorbells this process holds."""

from __future__ import annotations

import os

from .region import SHM_DIR

def _is_shm(target: str) -> bool:
    return target.startswith("/memfd:") or target.startswith(SHM_DIR + "/")


def open_descriptors() -> dict[int, str]:
    out = {}
    for name in os.listdir("/proc/self/fd"):
        try:
            out[int(name)] = os.readlink(f"/proc/self/fd/{name}")
        except OSError:
            pass  # the fd used by listdir itself is already gone
    return out


def capability_set() -> dict[str, list]:
    """Group open descriptors into shared-memory objects, doorbells, sockets."""
    caps: dict[str, list] = {"shm": [], "doorbell": [], "socket": [], "other": []}
    for fd, target in sorted(open_descriptors().items()):
        if _is_shm(target):
            caps["shm"].append([fd, target])
        elif target == "anon_inode:[eventfd]":
            caps["doorbell"].append([fd, target])
        elif target.startswith("socket:"):
            caps["socket"].append([fd, target])
        else:
            caps["other"].append([fd, target])
    return caps


def mapped_shared_bytes() -> int:
    """Bytes of this process's address space backed by shared-memory objects."""
    total = 0
    with open("/proc/self/maps") as fh:
        for line in fh:
            parts = line.split(maxsplit=5)
            if len(parts) < 6:
                continue
            if _is_shm(parts[5].strip()):
                lo, hi = (int(x, 16) for x in parts[0].split("-"))
                total += hi - lo
    return total


def openable_named(region_name: str, num_slices: int) -> list[str]:
    """Which ``<region_name>.<id>`` objects this process could open by name."""
    found = []
    for i in range(num_slices):
        path = os.path.join(SHM_DIR, f"{region_name}.{i}")
        try:
            fd = os.open(path, os.O_RDONLY)
        except OSError:
            continue
        os.close(fd)
        found.append(path)
    return found
