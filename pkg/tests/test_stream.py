import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shmslice.harness import count_occurrences
from shmslice.stream import MASK64, oracle_count, splitmix64, stream_block, stream_bytes


def scalar_stream(seed, start, length):
    """Byte-at-a-time reference built only on the scalar generator."""
    out = bytearray()
    for i in range(start, start + length):
        out.append(stream_block(seed, i // 8)[i % 8])
    return bytes(out)


def test_reference_vector():
    # published first output of splitmix64 seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert stream_block(0, 0) == bytes.fromhex("AFCD1D7B39A820E2")


def test_deterministic():
    assert bytes(stream_bytes(42, 0, 4096)) == bytes(stream_bytes(42, 0, 4096))


def test_seed_changes_first_byte():
    assert stream_block(0, 0)[0] == 0xAF
    assert stream_block(1, 0)[0] == 0xC1


@settings(max_examples=200, deadline=None)
@given(st.integers(0, MASK64), st.integers(0, 1 << 40), st.integers(0, 300))
def test_vectorized_matches_scalar(seed, start, length):
    assert bytes(stream_bytes(seed, start, length)) == scalar_stream(seed, start, length)


def test_wraps_modulo_2_64():
    seed = MASK64 - 2
    assert bytes(stream_bytes(seed, 0, 64)) == scalar_stream(seed, 0, 64)


class TestCount:
    def test_simple(self):
        assert count_occurrences(b"abcabca", ord("a")) == 3

    def test_empty(self):
        assert count_occurrences(b"", 0x61) == 0

    def test_one_mib_seed_42(self):
        # frozen from a pure-Python scalar scan of the same stream
        assert count_occurrences(bytes(stream_bytes(42, 0, 1 << 20)), 0x61) == 4092

    def test_memoryview_input(self):
        assert count_occurrences(memoryview(b"aaxa"), ord("a")) == 3


class TestOracle:
    def test_zero_bytes(self):
        assert oracle_count(7, 0, 0x61) == 0

    def test_frozen_64_mib(self):
        # frozen from a pure-Python scalar scan (no numpy) of 64 MiB
        assert oracle_count(42, 64 << 20, 0x61) == 262443

    def test_frozen_one_mib(self):
        assert oracle_count(42, 1 << 20, 0x61) == 4092

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, MASK64), st.integers(0, 5000), st.integers(0, 255))
    def test_matches_scalar(self, seed, n, t):
        assert oracle_count(seed, n, t) == scalar_stream(seed, 0, n).count(t)

    @pytest.mark.parametrize("split", [0, 1, 7, 8, 12345, (1 << 23) + 3])
    def test_prefix_additivity(self, split):
        total = (1 << 23) + 1000
        head = oracle_count(9, split, 0x20)
        tail = int(np.count_nonzero(stream_bytes(9, split, total - split) == 0x20))
        assert head + tail == oracle_count(9, total, 0x20)
