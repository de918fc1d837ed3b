from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmt.rng import make_rng
from cmt.tensor_io import WireFormatError, decode_tensor, decode_tensor_prefix, encode_tensor


def test_known_byte_layout():
    # 2x2 tensor [1,2,3,4]: magic, ndim=2, dims 2,2, then 4 f64 values.
    buf = encode_tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    want = b"CMTT" + struct.pack("<B", 2) + struct.pack("<2I", 2, 2)
    want += struct.pack("<4d", 1.0, 2.0, 3.0, 4.0)
    assert buf == want


def test_roundtrip_is_bit_exact():
    rng = make_rng(5)
    for shape in [(3,), (2, 5), (4, 3, 2), ()]:
        arr = rng.standard_normal(shape)
        back = decode_tensor(encode_tensor(arr))
        assert back.shape == arr.shape
        assert np.array_equal(back.view(np.uint64), arr.view(np.uint64) if arr.shape else arr.reshape(()).view(np.uint64))


def test_scalar_tensor():
    buf = encode_tensor(np.array(7.5))
    assert buf == b"CMTT\x00" + struct.pack("<d", 7.5)
    assert decode_tensor(buf) == np.array(7.5)


def test_bad_magic_rejected():
    with pytest.raises(WireFormatError):
        decode_tensor(b"XXXX\x01" + struct.pack("<I", 1) + struct.pack("<d", 1.0))


def test_truncated_header_rejected():
    with pytest.raises(WireFormatError):
        decode_tensor(b"CMT")
    with pytest.raises(WireFormatError):
        decode_tensor(b"CMTT\x02" + struct.pack("<I", 2))  # one of two dims


def test_payload_length_mismatch_rejected():
    buf = encode_tensor(np.zeros((2, 2)))
    with pytest.raises(WireFormatError):
        decode_tensor(buf[:-1])
    with pytest.raises(WireFormatError):
        decode_tensor(buf + b"\x00")


def test_excess_rank_rejected():
    with pytest.raises(WireFormatError):
        decode_tensor(b"CMTT" + bytes([9]) + b"\x00" * 36)


def test_prefix_decode_reports_consumed_bytes():
    a = np.arange(6.0).reshape(2, 3)
    b = np.array([9.0])
    buf = encode_tensor(a) + encode_tensor(b)
    got_a, used = decode_tensor_prefix(buf)
    assert np.array_equal(got_a, a)
    got_b, used2 = decode_tensor_prefix(buf[used:])
    assert np.array_equal(got_b, b)
    assert used + used2 == len(buf)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(1, 5), min_size=0, max_size=4),
    st.integers(0, 2**32 - 1),
)
def test_roundtrip_property(shape, seed):
    arr = make_rng(seed).standard_normal(tuple(shape))
    back = decode_tensor(encode_tensor(arr))
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)
