from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmt.rng import make_rng
from cmt.serving.wire import (
    DEFAULT_MAX_PAYLOAD,
    HEADER_SIZE,
    MAGIC,
    BadMagicError,
    EncodeRequest,
    EncodeResponse,
    Error,
    FuseRequest,
    FuseResponse,
    Health,
    MalformedPayloadError,
    OversizeError,
    StreamDecoder,
    TruncatedError,
    UnknownTypeError,
    WireFormatError,
    decode_message,
    encode_message,
)


def sample_messages() -> list:
    rng = make_rng(2024)
    return [
        EncodeRequest(1, "visual", rng.random((4, 4, 1))),
        EncodeRequest(2, "acoustic", rng.random(12)),
        EncodeRequest(3, "textual", np.array([0.0, 5.0, 3.0])),
        EncodeResponse(4, "visual", rng.random(8)),
        FuseRequest(5, rng.random(8), rng.random(8), rng.random(8)),
        FuseRequest(6, rng.random(8), rng.random(8), rng.random(8), sequential=True),
        FuseResponse(7, rng.random(3), rng.random(3), 2, "happiness",
                     np.array([9.5, 3.0, 2.0, 1.0, 2.5])),
        Health(8),
        Health(9, "fusion", "ab" * 32),
        Error(10, "checkpoint mismatch"),
        Error(11, ""),
        EncodeRequest(2 ** 64 - 1, "visual", np.zeros((1, 1, 1))),
        EncodeRequest(12, "", np.array(3.5)),          # scalar tensor, empty tag
    ]


class TestFrameLayout:
    def test_empty_health_is_minimal_frame(self):
        frame = encode_message(Health(0))
        assert len(frame) == HEADER_SIZE == 17
        assert frame == b"CMT1" + bytes([4]) + b"\x00" * 12

    def test_header_fields_hand_oracle(self):
        frame = encode_message(Error(0x0102030405060708, "hi"))
        assert frame[0:4] == MAGIC
        assert frame[4] == 5
        assert frame[5:13] == bytes([8, 7, 6, 5, 4, 3, 2, 1])  # little-endian
        assert struct.unpack("<I", frame[13:17])[0] == len(frame) - 17

    def test_encode_request_payload_is_tag_plus_tensor_bytes(self):
        # byte-layout oracle assembled by hand from the format definition
        m = EncodeRequest(9, "visual", np.array([[1.0, 2.0], [3.0, 4.0]]))
        want_payload = (
            struct.pack("<H", 6) + b"visual"
            + b"CMTT" + bytes([2]) + struct.pack("<II", 2, 2)
            + struct.pack("<4d", 1.0, 2.0, 3.0, 4.0)
        )
        frame = encode_message(m)
        assert frame[HEADER_SIZE:] == want_payload
        assert decode_message(frame) == m


class TestRoundtrip:
    def test_all_message_shapes_roundtrip_bit_exactly(self):
        for m in sample_messages():
            assert decode_message(encode_message(m)) == m

    def test_nan_payload_floats_survive_bit_exactly(self):
        m = FuseResponse(1, np.array([np.nan, 0.5]), np.array([1.0, -np.inf]),
                         0, "x", np.array([np.nan, 0, 0, 0, 0]))
        back = decode_message(encode_message(m))
        assert back == m
        assert np.isnan(back.probs[0]) and np.isinf(back.logits[1])

    def test_equality_is_discriminating(self):
        a = EncodeRequest(1, "visual", np.ones(3))
        assert a != EncodeRequest(2, "visual", np.ones(3))
        assert a != EncodeRequest(1, "textual", np.ones(3))
        assert a != EncodeRequest(1, "visual", np.ones(4))
        assert a != Health(1)

    def test_request_id_range_enforced(self):
        with pytest.raises(WireFormatError):
            encode_message(Health(-1))
        with pytest.raises(WireFormatError):
            encode_message(Health(2 ** 64))

    def test_oversize_rejected_at_encode(self):
        m = EncodeRequest(1, "visual", np.zeros(64))
        with pytest.raises(OversizeError):
            encode_message(m, max_payload=64)


class TestStreamDecoder:
    def test_three_way_split_decodes_identically(self):
        m = FuseRequest(3, np.ones(4), np.zeros(4), np.ones(4) * 2)
        frame = encode_message(m)
        for i in range(1, len(frame) - 1):
            for j in range(i + 1, len(frame)):
                if (i + j) % 7:        # keep the sweep quick but varied
                    continue
                dec = StreamDecoder()
                got = (dec.feed(frame[:i]) + dec.feed(frame[i:j])
                       + dec.feed(frame[j:]))
                assert got == [m]
                dec.close()

    def test_byte_at_a_time(self):
        m = Error(77, "slow loris")
        dec = StreamDecoder()
        got = []
        for b in encode_message(m):
            got += dec.feed(bytes([b]))
        assert got == [m]

    def test_many_frames_single_feed(self):
        msgs = sample_messages()
        blob = b"".join(encode_message(m) for m in msgs)
        dec = StreamDecoder()
        assert dec.feed(blob) == msgs
        assert dec.pending == 0
        dec.close()

    def test_close_mid_frame_is_truncation(self):
        frame = encode_message(Error(1, "gone"))
        dec = StreamDecoder()
        dec.feed(frame[:-1])
        with pytest.raises(TruncatedError):
            dec.close()

    def test_bad_magic_fails_fast(self):
        dec = StreamDecoder()
        with pytest.raises(BadMagicError):
            dec.feed(b"HTTP" + b"\x00" * 13)

    def test_unknown_type_fails_fast(self):
        dec = StreamDecoder()
        with pytest.raises(UnknownTypeError):
            dec.feed(MAGIC + bytes([6]) + b"\x00" * 12)

    def test_hostile_length_rejected_before_payload_arrives(self):
        # header alone declares 1 GiB; decoder must fail without buffering it
        header = struct.pack("<4sBQI", MAGIC, 4, 1, 1 << 30)
        dec = StreamDecoder()
        with pytest.raises(OversizeError):
            dec.feed(header)
        assert dec.pending <= HEADER_SIZE

    def test_failed_decoder_stays_closed(self):
        dec = StreamDecoder()
        with pytest.raises(BadMagicError):
            dec.feed(b"XXXX" + b"\x00" * 13)
        with pytest.raises(WireFormatError):
            dec.feed(b"")

    def test_trailing_garbage_in_payload_rejected(self):
        frame = bytearray(encode_message(Error(1, "x")))
        frame[13:17] = struct.pack("<I", len(frame) - 17 + 2)
        frame += b"zz"
        with pytest.raises(MalformedPayloadError):
            StreamDecoder().feed(bytes(frame))

    def test_decode_message_requires_exactly_one_frame(self):
        frame = encode_message(Health(5))
        with pytest.raises(TruncatedError):
            decode_message(frame[:-1] if len(frame) > 17 else frame[:10])
        with pytest.raises(MalformedPayloadError):
            decode_message(frame + frame)


class TestMalformedPayloads:
    def frame_with_payload(self, msg_type: int, payload: bytes, rid: int = 1) -> bytes:
        return struct.pack("<4sBQI", MAGIC, msg_type, rid, len(payload)) + payload

    def test_string_length_prefix_overruns(self):
        payload = struct.pack("<H", 10) + b"abc"
        with pytest.raises(MalformedPayloadError):
            decode_message(self.frame_with_payload(5, payload))

    def test_non_utf8_string(self):
        payload = struct.pack("<H", 2) + b"\xff\xfe"
        with pytest.raises(MalformedPayloadError):
            decode_message(self.frame_with_payload(5, payload))

    def test_bad_embedded_tensor_magic(self):
        payload = struct.pack("<H", 1) + b"v" + b"XXXX" + b"\x00" * 5
        with pytest.raises(MalformedPayloadError):
            decode_message(self.frame_with_payload(0, payload))

    def test_fuse_request_bad_mode_byte(self):
        m = FuseRequest(1, np.ones(2), np.ones(2), np.ones(2))
        frame = bytearray(encode_message(m))
        frame[HEADER_SIZE] = 7
        with pytest.raises(MalformedPayloadError):
            decode_message(bytes(frame))

    def test_empty_payload_where_fields_required(self):
        for msg_type in (0, 1, 2, 3, 5):
            with pytest.raises(MalformedPayloadError):
                decode_message(self.frame_with_payload(msg_type, b""))


class TestFuzz:
    def test_mutation_fuzz_never_crashes(self):
        rng = make_rng(99)
        frames = [encode_message(m) for m in sample_messages()]
        outcomes = {"ok": 0, "typed": 0}
        for trial in range(3000):
            frame = bytearray(frames[trial % len(frames)])
            kind = trial % 3
            if kind == 0:       # flip one byte
                pos = int(rng.integers(0, len(frame)))
                frame[pos] ^= int(rng.integers(1, 256))
                data = bytes(frame)
            elif kind == 1:     # truncate
                data = bytes(frame[:int(rng.integers(0, len(frame)))])
            else:               # append garbage
                data = bytes(frame) + bytes(rng.integers(0, 256, size=5, dtype=np.uint8))
            dec = StreamDecoder()
            try:
                dec.feed(data)
                dec.close()
                outcomes["ok"] += 1
            except WireFormatError:
                outcomes["typed"] += 1
        assert outcomes["typed"] > 0 and sum(outcomes.values()) == 3000

    def test_random_blob_fuzz_never_crashes(self):
        rng = make_rng(100)
        for _ in range(2000):
            blob = bytes(rng.integers(0, 256, size=int(rng.integers(0, 80)),
                                      dtype=np.uint8))
            dec = StreamDecoder()
            try:
                dec.feed(blob)
                dec.close()
            except WireFormatError:
                pass

    @settings(max_examples=150, deadline=None)
    @given(
        rid=st.integers(0, 2 ** 64 - 1),
        stage=st.text(max_size=40),
        values=st.lists(
            st.floats(allow_nan=False, width=64), min_size=1, max_size=16),
    )
    def test_property_roundtrip_encode_request(self, rid, stage, values):
        m = EncodeRequest(rid, stage, np.array(values))
        assert decode_message(encode_message(m)) == m

    @settings(max_examples=150, deadline=None)
    @given(data=st.binary(max_size=60))
    def test_property_arbitrary_bytes_typed_or_ok(self, data):
        dec = StreamDecoder()
        try:
            dec.feed(data)
            dec.close()
        except WireFormatError:
            pass
