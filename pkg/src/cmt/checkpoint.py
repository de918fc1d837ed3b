"""Single-file parameter checkpoints.

Layout, all little-endian:

    bytes 0-3   magic b"CMTC"
    bytes 4-5   format version (u16), currently 1
    u32         entry count
    per entry   u16 name length, UTF-8 name, u64 absolute file offset
    then        one tensor blob per entry at its recorded offset

Tensor blobs use the shared binary tensor layout. Save and load roundtrip
bit-exactly; names are stored sorted so identical parameter sets always
produce identical files.

Non-tensor metadata (the model configuration JSON) rides along as a reserved
``__config__`` entry whose values are the UTF-8 bytes widened to floats;
exact small-integer values survive the f64 trip unchanged.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CmtError
from .tensor_io import decode_tensor_prefix, encode_tensor

MAGIC = b"CMTC"
VERSION = 1
CONFIG_KEY = "__config__"


class CheckpointError(CmtError):
    """Unreadable, corrupt, or version-incompatible checkpoint file."""


def _encode_config(config: dict) -> np.ndarray:
    raw = json.dumps(config, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def _decode_config(arr: np.ndarray) -> dict:
    raw = arr.astype(np.uint8).tobytes()
    return json.loads(raw.decode("utf-8"))


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write named tensors (and optional config metadata) to one file."""
    entries = dict(tensors)
    if CONFIG_KEY in entries:
        raise CheckpointError(f"tensor name {CONFIG_KEY!r} is reserved")
    if config is not None:
        entries[CONFIG_KEY] = _encode_config(config)
    names = sorted(entries)
    blobs = [encode_tensor(entries[n]) for n in names]

    manifest_size = 4 + sum(2 + len(n.encode("utf-8")) + 8 for n in names)
    offset = 4 + 2 + manifest_size
    manifest = struct.pack("<I", len(names))
    for name, blob in zip(names, blobs):
        nb = name.encode("utf-8")
        manifest += struct.pack("<H", len(nb)) + nb + struct.pack("<Q", offset)
        offset += len(blob)

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read a checkpoint; returns (tensors, config-or-None)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(buf) < 10:
        raise CheckpointError(f"checkpoint {path} too short ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r} in {path}")
    version = struct.unpack_from("<H", buf, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    count = struct.unpack_from("<I", buf, 6)[0]
    pos = 10
    offsets: list[tuple[str, int]] = []
    for _ in range(count):
        if pos + 2 > len(buf):
            raise CheckpointError("truncated checkpoint manifest")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + nlen + 8 > len(buf):
            raise CheckpointError("truncated checkpoint manifest entry")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        offsets.append((name, off))

    tensors: dict[str, np.ndarray] = {}
    for name, off in offsets:
        if off >= len(buf):
            raise CheckpointError(f"entry {name!r} offset {off} beyond file end")
        try:
            arr, _ = decode_tensor_prefix(buf[off:])
        except CmtError as e:
            raise CheckpointError(f"entry {name!r} is corrupt: {e}") from e
        tensors[name] = arr

    config = None
    if CONFIG_KEY in tensors:
        config = _decode_config(tensors.pop(CONFIG_KEY))
    return tensors, config


def checkpoint_hash(path: str | Path) -> str:
    """SHA-256 of the checkpoint file; stages compare these at startup."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
