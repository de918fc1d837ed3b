"""Binary wire protocol spoken by every service in the pipeline.

Frame layout (all integers little-endian):

    magic   4 bytes  b"CMT1"
    type    u8       0=EncodeRequest 1=EncodeResponse 2=FuseRequest
                     3=FuseResponse  4=Health        5=Error
    id      u64      request id, echoed verbatim in every reply
    length  u32      payload byte count
    payload length bytes, type-specific

Payload conventions: tensors use the self-describing binary tensor layout
from :mod:`cmt.tensor_io`; strings are u16-length-prefixed UTF-8. Every
decoder checks exact payload consumption, so decode(encode(m)) == m
bit-exactly and trailing garbage is a typed error.

The stream decoder is incremental (arbitrary read boundaries) and bounded:
it validates the header — magic, type, payload length against the 16 MiB
default cap — before buffering any payload, so hostile lengths fail fast
without allocation. Connection policy on any decode error: reply with an
Error message, then close the stream.
"""

from __future__ import annotations

import socket
import struct
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..tensor_io import WireFormatError, decode_tensor_prefix, encode_tensor

MAGIC = b"CMT1"
HEADER = struct.Struct("<4sBQI")
HEADER_SIZE = HEADER.size          # 17 bytes
DEFAULT_MAX_PAYLOAD = 16 * 1024 * 1024

MSG_ENCODE_REQUEST = 0
MSG_ENCODE_RESPONSE = 1
MSG_FUSE_REQUEST = 2
MSG_FUSE_RESPONSE = 3
MSG_HEALTH = 4
MSG_ERROR = 5
_KNOWN_TYPES = frozenset(range(6))

TIMING_FIELDS = ("total_ms", "visual_ms", "audio_ms", "text_ms", "fuse_ms")


class BadMagicError(WireFormatError):
    """Frame does not start with the protocol magic."""


class UnknownTypeError(WireFormatError):
    """Frame header carries an unrecognized message type."""


class OversizeError(WireFormatError):
    """Declared payload length exceeds the configured maximum."""


class TruncatedError(WireFormatError):
    """Byte stream ended mid-frame."""


class MalformedPayloadError(WireFormatError):
    """Payload bytes do not parse as the declared message type."""


def _arrays_equal(a: np.ndarray, b: np.ndarray) -> bool:
    # bit-exact, including NaN payloads
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def _as_f64(arr) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr, dtype=np.float64))


@dataclass(eq=False)
class EncodeRequest:
    """Raw modality input for one encoder stage.

    ``tensor`` is the stage-appropriate input: pixel grid [H,W,C] for
    visual, waveform [T] for acoustic, token ids [L] (integer-valued) for
    textual. Payload = stage tag + tensor bytes, nothing else.
    """
    request_id: int
    stage: str
    tensor: np.ndarray

    msg_type = MSG_ENCODE_REQUEST

    def __post_init__(self):
        self.tensor = _as_f64(self.tensor)

    def __eq__(self, other):
        return (isinstance(other, EncodeRequest)
                and self.request_id == other.request_id
                and self.stage == other.stage
                and _arrays_equal(self.tensor, other.tensor))


@dataclass(eq=False)
class EncodeResponse:
    request_id: int
    stage: str
    embedding: np.ndarray

    msg_type = MSG_ENCODE_RESPONSE

    def __post_init__(self):
        self.embedding = _as_f64(self.embedding)

    def __eq__(self, other):
        return (isinstance(other, EncodeResponse)
                and self.request_id == other.request_id
                and self.stage == other.stage
                and _arrays_equal(self.embedding, other.embedding))


@dataclass(eq=False)
class FuseRequest:
    """Three embeddings for the fusion stage — or, when sent to the
    gateway, the three raw modality tensors of one sample. ``sequential``
    asks the gateway to dispatch encoders one after another instead of
    concurrently (benchmark baseline); stages ignore it."""
    request_id: int
    z_visual: np.ndarray
    z_audio: np.ndarray
    z_text: np.ndarray
    sequential: bool = False

    msg_type = MSG_FUSE_REQUEST

    def __post_init__(self):
        self.z_visual = _as_f64(self.z_visual)
        self.z_audio = _as_f64(self.z_audio)
        self.z_text = _as_f64(self.z_text)

    def __eq__(self, other):
        return (isinstance(other, FuseRequest)
                and self.request_id == other.request_id
                and self.sequential == other.sequential
                and _arrays_equal(self.z_visual, other.z_visual)
                and _arrays_equal(self.z_audio, other.z_audio)
                and _arrays_equal(self.z_text, other.z_text))


@dataclass(eq=False)
class FuseResponse:
    """Classification result. ``timings_ms`` is (total, visual, audio,
    text, fuse); the fusion stage sends zeros, the gateway fills in its
    measured values when replying to clients."""
    request_id: int
    probs: np.ndarray
    logits: np.ndarray
    argmax: int
    label: str
    timings_ms: np.ndarray = field(default_factory=lambda: np.zeros(5))

    msg_type = MSG_FUSE_RESPONSE

    def __post_init__(self):
        self.probs = _as_f64(self.probs)
        self.logits = _as_f64(self.logits)
        self.timings_ms = _as_f64(self.timings_ms)
        if self.timings_ms.shape != (5,):
            raise MalformedPayloadError(
                f"timings must have 5 entries, got shape {self.timings_ms.shape}"
            )
        if not 0 <= self.argmax <= 0xFFFF:
            raise MalformedPayloadError(f"argmax {self.argmax} outside u16 range")

    def __eq__(self, other):
        return (isinstance(other, FuseResponse)
                and self.request_id == other.request_id
                and self.argmax == other.argmax
                and self.label == other.label
                and _arrays_equal(self.probs, other.probs)
                and _arrays_equal(self.logits, other.logits)
                and _arrays_equal(self.timings_ms, other.timings_ms))


@dataclass(eq=False)
class Health:
    """Ping/pong. Requests carry no body (17-byte frame); replies identify
    the stage and the hash of the checkpoint it serves."""
    request_id: int
    stage: str = ""
    config_hash: str = ""

    msg_type = MSG_HEALTH

    def __eq__(self, other):
        return (isinstance(other, Health)
                and self.request_id == other.request_id
                and self.stage == other.stage
                and self.config_hash == other.config_hash)


@dataclass(eq=False)
class Error:
    request_id: int
    reason: str

    msg_type = MSG_ERROR

    def __eq__(self, other):
        return (isinstance(other, Error)
                and self.request_id == other.request_id
                and self.reason == other.reason)


Message = EncodeRequest | EncodeResponse | FuseRequest | FuseResponse | Health | Error


# ---------------------------------------------------------------------------
# Field codecs
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MalformedPayloadError(f"string field too long ({len(raw)} bytes)")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes, offset: int) -> tuple[str, int]:
    if offset + 2 > len(buf):
        raise MalformedPayloadError("truncated string length prefix")
    (n,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    if offset + n > len(buf):
        raise MalformedPayloadError("string shorter than its length prefix")
    try:
        return buf[offset:offset + n].decode("utf-8"), offset + n
    except UnicodeDecodeError as e:
        raise MalformedPayloadError(f"string field is not UTF-8: {e}") from e


def _take_tensor(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    try:
        arr, used = decode_tensor_prefix(buf[offset:])
    except WireFormatError as e:
        raise MalformedPayloadError(f"embedded tensor: {e}") from e
    return arr, offset + used


# ---------------------------------------------------------------------------
# Payload encode/decode per type
# ---------------------------------------------------------------------------


def _encode_payload(m: Message) -> bytes:
    if isinstance(m, EncodeRequest):
        return _pack_str(m.stage) + encode_tensor(m.tensor)
    if isinstance(m, EncodeResponse):
        return _pack_str(m.stage) + encode_tensor(m.embedding)
    if isinstance(m, FuseRequest):
        return (struct.pack("<B", 1 if m.sequential else 0)
                + encode_tensor(m.z_visual)
                + encode_tensor(m.z_audio)
                + encode_tensor(m.z_text))
    if isinstance(m, FuseResponse):
        return (encode_tensor(m.probs)
                + encode_tensor(m.logits)
                + struct.pack("<H", m.argmax)
                + _pack_str(m.label)
                + struct.pack("<5d", *m.timings_ms))
    if isinstance(m, Health):
        if not m.stage and not m.config_hash:
            return b""
        return _pack_str(m.stage) + _pack_str(m.config_hash)
    if isinstance(m, Error):
        return _pack_str(m.reason)
    raise WireFormatError(f"cannot encode object of type {type(m).__name__}")


def _expect_consumed(buf: bytes, offset: int, what: str) -> None:
    if offset != len(buf):
        raise MalformedPayloadError(
            f"{what} payload has {len(buf) - offset} trailing bytes"
        )


def _decode_payload(msg_type: int, request_id: int, payload: bytes) -> Message:
    if msg_type == MSG_ENCODE_REQUEST:
        stage, off = _unpack_str(payload, 0)
        tensor, off = _take_tensor(payload, off)
        _expect_consumed(payload, off, "EncodeRequest")
        return EncodeRequest(request_id, stage, tensor)
    if msg_type == MSG_ENCODE_RESPONSE:
        stage, off = _unpack_str(payload, 0)
        emb, off = _take_tensor(payload, off)
        _expect_consumed(payload, off, "EncodeResponse")
        return EncodeResponse(request_id, stage, emb)
    if msg_type == MSG_FUSE_REQUEST:
        if len(payload) < 1:
            raise MalformedPayloadError("FuseRequest payload missing mode byte")
        flag = payload[0]
        if flag not in (0, 1):
            raise MalformedPayloadError(f"FuseRequest mode byte must be 0/1, got {flag}")
        zv, off = _take_tensor(payload, 1)
        za, off = _take_tensor(payload, off)
        zt, off = _take_tensor(payload, off)
        _expect_consumed(payload, off, "FuseRequest")
        return FuseRequest(request_id, zv, za, zt, sequential=bool(flag))
    if msg_type == MSG_FUSE_RESPONSE:
        probs, off = _take_tensor(payload, 0)
        logits, off = _take_tensor(payload, off)
        if off + 2 > len(payload):
            raise MalformedPayloadError("FuseResponse truncated before argmax")
        (argmax,) = struct.unpack_from("<H", payload, off)
        off += 2
        label, off = _unpack_str(payload, off)
        if off + 40 > len(payload):
            raise MalformedPayloadError("FuseResponse truncated before timings")
        timings = np.array(struct.unpack_from("<5d", payload, off))
        off += 40
        _expect_consumed(payload, off, "FuseResponse")
        return FuseResponse(request_id, probs, logits, int(argmax), label, timings)
    if msg_type == MSG_HEALTH:
        if not payload:
            return Health(request_id)
        stage, off = _unpack_str(payload, 0)
        config_hash, off = _unpack_str(payload, off)
        _expect_consumed(payload, off, "Health")
        return Health(request_id, stage, config_hash)
    if msg_type == MSG_ERROR:
        reason, off = _unpack_str(payload, 0)
        _expect_consumed(payload, off, "Error")
        return Error(request_id, reason)
    raise UnknownTypeError(f"unknown message type {msg_type}")


# ---------------------------------------------------------------------------
# Frame encode/decode
# ---------------------------------------------------------------------------


def encode_message(m: Message, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if not 0 <= m.request_id < 2 ** 64:
        raise WireFormatError(f"request id {m.request_id} outside u64 range")
    payload = _encode_payload(m)
    if len(payload) > max_payload:
        raise OversizeError(
            f"payload {len(payload)} bytes exceeds maximum {max_payload}"
        )
    return HEADER.pack(MAGIC, m.msg_type, m.request_id, len(payload)) + payload


def decode_message(buf: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> Message:
    """Decode exactly one complete frame; trailing bytes are an error."""
    decoder = StreamDecoder(max_payload)
    messages = decoder.feed(buf)
    if not messages:
        raise TruncatedError(f"frame incomplete at {len(buf)} bytes")
    if len(messages) > 1 or decoder.pending:
        raise MalformedPayloadError("extra bytes after first frame")
    return messages[0]


class StreamDecoder:
    """Incremental frame decoder tolerant of arbitrary read boundaries.

    Header fields are validated as soon as 17 bytes are available — before
    any payload accumulates — so bad magic, unknown types, and hostile
    payload lengths fail without buffering. After an error the decoder is
    poisoned: the stream has lost framing, so the connection must close.
    """

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self._buf = bytearray()
        self._max = max_payload
        self._failed = False

    @property
    def pending(self) -> int:
        """Bytes buffered but not yet decoded."""
        return len(self._buf)

    def _fail(self, exc: WireFormatError):
        self._failed = True
        raise exc

    def feed(self, data: bytes) -> list[Message]:
        if self._failed:
            raise WireFormatError("decoder already failed; close the stream")
        self._buf += data
        out: list[Message] = []
        while len(self._buf) >= HEADER_SIZE:
            magic, msg_type, request_id, length = HEADER.unpack(
                bytes(self._buf[:HEADER_SIZE])
            )
            if magic != MAGIC:
                self._fail(BadMagicError(f"bad magic {magic!r}"))
            if msg_type not in _KNOWN_TYPES:
                self._fail(UnknownTypeError(f"unknown message type {msg_type}"))
            if length > self._max:
                self._fail(OversizeError(
                    f"declared payload {length} bytes exceeds maximum {self._max}"
                ))
            if len(self._buf) < HEADER_SIZE + length:
                break
            payload = bytes(self._buf[HEADER_SIZE:HEADER_SIZE + length])
            del self._buf[:HEADER_SIZE + length]
            try:
                out.append(_decode_payload(msg_type, request_id, payload))
            except WireFormatError as e:
                self._fail(e if isinstance(e, MalformedPayloadError)
                           else MalformedPayloadError(str(e)))
        return out

    def close(self) -> None:
        """Signal end of stream; a partial frame is a truncation error."""
        if self._buf and not self._failed:
            self._fail(TruncatedError(
                f"stream ended mid-frame with {len(self._buf)} bytes pending"
            ))


class ConnectionClosed(WireFormatError):
    """Peer closed the connection at a frame boundary."""


class MessageSocket:
    """Blocking, message-framed socket: whole frames out, whole messages in.

    Not thread-safe; callers serialize access per connection.
    """

    RECV_CHUNK = 65536

    def __init__(self, sock: socket.socket, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self._sock = sock
        self._decoder = StreamDecoder(max_payload)
        self._queue: deque[Message] = deque()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float | None = 5.0,
                max_payload: int = DEFAULT_MAX_PAYLOAD) -> "MessageSocket":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(sock, max_payload)

    def __enter__(self) -> "MessageSocket":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def send(self, msg: Message) -> None:
        self._sock.sendall(encode_message(msg))

    def recv(self, timeout: float | None = None) -> Message:
        """Next message; raises TimeoutError when ``timeout`` seconds pass
        without one, ConnectionClosed on clean EOF, TruncatedError on EOF
        mid-frame."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._queue:
            if deadline is None:
                self._sock.settimeout(None)
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError("no message within deadline")
                self._sock.settimeout(remaining)
            data = self._sock.recv(self.RECV_CHUNK)
            if not data:
                if self._decoder.pending:
                    self._decoder.close()   # raises TruncatedError
                raise ConnectionClosed("peer closed the connection")
            self._queue.extend(self._decoder.feed(data))
        return self._queue.popleft()

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


__all__ = [
    "MAGIC", "HEADER_SIZE", "DEFAULT_MAX_PAYLOAD", "TIMING_FIELDS",
    "MSG_ENCODE_REQUEST", "MSG_ENCODE_RESPONSE", "MSG_FUSE_REQUEST",
    "MSG_FUSE_RESPONSE", "MSG_HEALTH", "MSG_ERROR",
    "EncodeRequest", "EncodeResponse", "FuseRequest", "FuseResponse",
    "Health", "Error", "Message",
    "encode_message", "decode_message", "StreamDecoder", "MessageSocket",
    "WireFormatError", "BadMagicError", "UnknownTypeError", "OversizeError",
    "TruncatedError", "MalformedPayloadError", "ConnectionClosed",
]
