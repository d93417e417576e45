"""Deterministic byte stream (splitmix64 blocks) and the reference counter.

Byte ``i`` of the stream for ``seed`` is byte ``i % 8`` of the little-endian
encoding of ``splitmix64(seed + i // 8)``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

_ORACLE_CHUNK = 1 << 20  # blocks per oracle step (8 MiB)


def splitmix64(x: int) -> int:
    z = (x + GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def stream_block(seed: int, block_index: int) -> bytes:
    return splitmix64((seed + block_index) & MASK64).to_bytes(8, "little")


def _blocks(seed: int, first: int, count: int) -> np.ndarray:
    z = np.arange(first, first + count, dtype=np.uint64)
    z += np.uint64(seed & MASK64)  # wraps modulo 2**64 like the scalar path
    z += np.uint64(GAMMA)
    z ^= z >> np.uint64(30)
    z *= np.uint64(MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(MIX2)
    z ^= z >> np.uint64(31)
    return z.astype("<u8", copy=False)


def stream_bytes(seed: int, start: int, length: int) -> np.ndarray:
    """Bytes ``[start, start + length)`` of the stream as a uint8 array."""
    if length <= 0:
        return np.empty(0, dtype=np.uint8)
    first = start // 8
    last = (start + length + 7) // 8
    raw = _blocks(seed, first, last - first).view(np.uint8)
    skip = start - first * 8
    return raw[skip:skip + length]


def fill_stream(out, seed: int, start: int) -> None:
    """Write stream bytes starting at ``start`` into the writable buffer ``out``."""
    dst = np.frombuffer(out, dtype=np.uint8)
    dst[:] = stream_bytes(seed, start, dst.size)


def oracle_count(seed: int, total_data: int, target: int) -> int:
    """Single pass over the whole stream from byte 0, no striping involved."""
    total = 0
    done = 0
    block = 0
    t = np.uint8(target)
    while done < total_data:
        chunk = _blocks(seed, block, _ORACLE_CHUNK).view(np.uint8)
        take = min(chunk.size, total_data - done)
        total += int(np.count_nonzero(chunk[:take] == t))
        done += take
        block += _ORACLE_CHUNK
    return total
