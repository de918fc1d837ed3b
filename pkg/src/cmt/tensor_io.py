"""Binary tensor serialization.

Layout, all little-endian:

    bytes 0-3   magic b"CMTT"
    byte  4     ndim (u8)
    next        ndim x u32 dimension sizes
    rest        float64 values in row-major order

Decoding validates the magic, the header length, and that the payload holds
exactly prod(dims) values; anything else raises ``WireFormatError`` so a
corrupt stream never turns into a silently wrong tensor.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CmtError

MAGIC = b"CMTT"
MAX_NDIM = 8


class WireFormatError(CmtError):
    """Malformed or truncated binary payload."""


def encode_tensor(arr: np.ndarray) -> bytes:
    # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d, and
    # tobytes(order="C") copies non-contiguous data anyway.
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > MAX_NDIM:
        raise WireFormatError(f"tensor rank {arr.ndim} exceeds limit {MAX_NDIM}")
    header = MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise WireFormatError(f"tensor payload too short: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise WireFormatError(f"bad tensor magic {buf[:4]!r}")
    ndim = buf[4]
    if ndim > MAX_NDIM:
        raise WireFormatError(f"tensor rank {ndim} exceeds limit {MAX_NDIM}")
    header_end = 5 + 4 * ndim
    if len(buf) < header_end:
        raise WireFormatError("truncated tensor dimension header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 5)
    count = 1
    for d in dims:
        count *= d
    expected = header_end + 8 * count
    if len(buf) != expected:
        raise WireFormatError(
            f"tensor payload length {len(buf)} != expected {expected} for dims {dims}"
        )
    values = np.frombuffer(buf, dtype="<f8", offset=header_end, count=count)
    return values.reshape(dims).copy()


def decode_tensor_prefix(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode a tensor at the start of ``buf``; return it and the bytes consumed."""
    if len(buf) < 5:
        raise WireFormatError(f"tensor payload too short: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise WireFormatError(f"bad tensor magic {buf[:4]!r}")
    ndim = buf[4]
    if ndim > MAX_NDIM:
        raise WireFormatError(f"tensor rank {ndim} exceeds limit {MAX_NDIM}")
    header_end = 5 + 4 * ndim
    if len(buf) < header_end:
        raise WireFormatError("truncated tensor dimension header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 5)
    count = 1
    for d in dims:
        count *= d
    end = header_end + 8 * count
    if len(buf) < end:
        raise WireFormatError(
            f"tensor needs {end} bytes for dims {dims}, only {len(buf)} available"
        )
    values = np.frombuffer(buf, dtype="<f8", offset=header_end, count=count)
    return values.reshape(dims).copy(), end
