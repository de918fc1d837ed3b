"""One pipeline stage as a standalone TCP service.

A stage loads a checkpoint, binds a listening socket, and serves wire
messages: encoder stages (visual/acoustic/textual) answer EncodeRequests
with their modality's embedding; the fusion stage answers FuseRequests
with the classification result; every stage answers Health with its name
and checkpoint hash. Requests on one connection are processed in order;
concurrent connections are served independently (thread per connection).

Error policy: a per-request model error produces an Error reply carrying
that request's id and the connection stays open; a protocol decode error
produces an Error reply with id 0 and the connection closes, since framing
is lost.

Run as a worker process with ``python3 -m cmt.serving.stage``; after
binding it prints ``PORT <n>`` on stdout so a parent that asked for an
ephemeral port can find it.

A stage may instead run as a *stub* (``--stub-delay-ms``): it skips the
checkpoint, sleeps the given time per request, and returns canned zero
embeddings (or a uniform distribution for fusion) — a load generator's
stand-in for model compute with a controlled service time.
"""

from __future__ import annotations

import argparse
import socket
import sys
import threading
import time

import numpy as np

from ..checkpoint import checkpoint_hash, load_checkpoint
from ..config import ModelConfig
from ..encoders import (
    AudioWaveform,
    ModalityEmbedding,
    TokenSequence,
    VisualFrame,
    encode_audio,
    encode_text,
    encode_visual,
)
from ..errors import CmtError, ConfigError, InputError
from ..fusion import CmtModel
from ..tensor import Tensor
from .config import ENCODER_STAGES, STAGE_NAMES
from .wire import (
    DEFAULT_MAX_PAYLOAD,
    EncodeRequest,
    EncodeResponse,
    Error,
    FuseRequest,
    FuseResponse,
    Health,
    Message,
    MessageSocket,
    StreamDecoder,
    WireFormatError,
    encode_message,
)

STUB_HASH = "stub"


def model_from_checkpoint(path: str) -> tuple[CmtModel, str]:
    """Load (model, checkpoint file hash). The checkpoint's embedded config
    must contain the model section."""
    arrays, config = load_checkpoint(path)
    if not config or "model" not in config:
        raise ConfigError(f"checkpoint {path} carries no model config")
    cfg = ModelConfig.from_dict(config["model"])
    model = CmtModel.init(cfg, seed=0)
    model.load_arrays(arrays)
    return model, checkpoint_hash(path)


class StageServer:
    """Serve one stage on a TCP socket, one thread per connection."""

    def __init__(
        self,
        stage: str,
        checkpoint: str | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
        max_inflight: int = 8,
        stub_delay_ms: float | None = None,
        stub_dim: int = 32,
        max_payload: int = DEFAULT_MAX_PAYLOAD,
    ):
        if stage not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {stage!r}")
        self.stage = stage
        self.stub_delay_ms = stub_delay_ms
        self.stub_dim = stub_dim
        self.max_payload = max_payload
        self._inflight = threading.BoundedSemaphore(max_inflight)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

        if stub_delay_ms is None:
            if checkpoint is None:
                raise ConfigError(f"stage {stage}: checkpoint required")
            self.model, self.config_hash = model_from_checkpoint(checkpoint)
            self._warm_up()
        else:
            self.model = None
            self.config_hash = STUB_HASH

        self._listener = socket.create_server((host, port), backlog=64)
        self.host, self.port = self._listener.getsockname()[:2]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"stage-{stage}-accept", daemon=True
        )

    def start(self) -> "StageServer":
        self._accept_thread.start()
        return self

    def _warm_up(self) -> None:
        """Run one inference before accepting traffic so compiled kernels
        and lazy caches are paid for at startup, not by the first request."""
        cfg = self.model.cfg
        if self.stage == "fusion":
            zero = ModalityEmbedding(Tensor(np.zeros(cfg.embed_dim)), "visual")
            self.model.forward_fused(
                zero,
                ModalityEmbedding(Tensor(np.zeros(cfg.embed_dim)), "acoustic"),
                ModalityEmbedding(Tensor(np.zeros(cfg.embed_dim)), "textual"),
            )
        elif self.stage == "visual":
            self._encode(np.zeros((cfg.image_height, cfg.image_width,
                                   cfg.image_channels)))
        elif self.stage == "acoustic":
            self._encode(np.zeros(cfg.audio_samples))
        else:
            self._encode(np.zeros(1))

    # -- request handling --------------------------------------------------

    def _handle(self, msg: Message) -> Message:
        rid = msg.request_id
        if isinstance(msg, Health):
            return Health(rid, stage=self.stage, config_hash=self.config_hash)
        try:
            if isinstance(msg, EncodeRequest):
                return self._handle_encode(rid, msg)
            if isinstance(msg, FuseRequest):
                return self._handle_fuse(rid, msg)
            return Error(rid, f"stage {self.stage} cannot handle "
                              f"{type(msg).__name__}")
        except CmtError as e:
            return Error(rid, f"{type(e).__name__}: {e}")

    def _handle_encode(self, rid: int, msg: EncodeRequest) -> Message:
        if self.stage == "fusion":
            return Error(rid, "fusion stage does not encode modalities")
        if msg.stage != self.stage:
            return Error(rid, f"stage mismatch: this service is {self.stage}, "
                              f"request addressed {msg.stage!r}")
        if self.stub_delay_ms is not None:
            time.sleep(self.stub_delay_ms / 1000.0)
            return EncodeResponse(rid, self.stage, np.zeros(self.stub_dim))
        emb = self._encode(msg.tensor)
        return EncodeResponse(rid, self.stage, emb.vector.data)

    def _encode(self, tensor: np.ndarray) -> ModalityEmbedding:
        cfg = self.model.cfg
        if self.stage == "visual":
            if tensor.ndim != 3:
                raise InputError(f"visual input must be 3-D, got {tensor.ndim}-D")
            return encode_visual(VisualFrame(tensor), self.model.params, cfg)
        if self.stage == "acoustic":
            if tensor.ndim != 1:
                raise InputError(f"acoustic input must be 1-D, got {tensor.ndim}-D")
            wave = AudioWaveform(tensor, cfg.sample_rate)
            return encode_audio(wave, self.model.params, cfg)
        # textual
        if tensor.ndim != 1:
            raise InputError(f"textual input must be 1-D, got {tensor.ndim}-D")
        ids = []
        for x in tensor:
            if x != int(x):
                raise InputError(f"token id {x} is not an integer")
            ids.append(int(x))
        return encode_text(TokenSequence(ids), self.model.params, cfg)

    def _handle_fuse(self, rid: int, msg: FuseRequest) -> Message:
        if self.stage != "fusion":
            return Error(rid, f"stage {self.stage} does not fuse")
        if self.stub_delay_ms is not None:
            time.sleep(self.stub_delay_ms / 1000.0)
            k = self.stub_dim
            return FuseResponse(rid, np.full(k, 1.0 / k), np.zeros(k), 0, "stub")
        dist = self.model.forward_fused(
            ModalityEmbedding(Tensor(msg.z_visual), "visual"),
            ModalityEmbedding(Tensor(msg.z_audio), "acoustic"),
            ModalityEmbedding(Tensor(msg.z_text), "textual"),
        )
        label = self.model.cfg.labels[dist.argmax]
        return FuseResponse(rid, dist.probs.data, dist.logits.data,
                            dist.argmax, label)

    # -- socket plumbing ----------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return      # listener closed
            t = threading.Thread(target=self._serve_connection, args=(conn,),
                                 name=f"stage-{self.stage}-conn", daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_connection(self, conn: socket.socket) -> None:
        decoder = StreamDecoder(self.max_payload)
        try:
            while not self._stop.is_set():
                try:
                    data = conn.recv(65536)
                except OSError:
                    return
                if not data:
                    return
                try:
                    messages = decoder.feed(data)
                except WireFormatError as e:
                    # framing lost: error reply, then close this stream
                    try:
                        conn.sendall(encode_message(
                            Error(0, f"{type(e).__name__}: {e}")))
                    except OSError:
                        pass
                    return
                for msg in messages:
                    with self._inflight:
                        reply = self._handle(msg)
                    try:
                        conn.sendall(encode_message(reply))
                    except OSError:
                        return
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def close(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass


def connect(server_or_host, port: int | None = None,
            timeout: float | None = 5.0) -> MessageSocket:
    """Client connection to a StageServer instance or a (host, port)."""
    if isinstance(server_or_host, StageServer):
        return MessageSocket.connect(server_or_host.host, server_or_host.port,
                                     timeout)
    return MessageSocket.connect(server_or_host, port, timeout)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cmt-stage", description="run one pipeline stage service")
    parser.add_argument("--stage", required=True, choices=STAGE_NAMES)
    parser.add_argument("--checkpoint")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--max-inflight", type=int, default=8)
    parser.add_argument("--stub-delay-ms", type=float, default=None)
    parser.add_argument("--stub-dim", type=int, default=32)
    args = parser.parse_args(argv)
    try:
        server = StageServer(
            stage=args.stage, checkpoint=args.checkpoint,
            host=args.host, port=args.port, max_inflight=args.max_inflight,
            stub_delay_ms=args.stub_delay_ms, stub_dim=args.stub_dim,
        ).start()
    except CmtError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    print(f"PORT {server.port}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        server.close()
    return 0


__all__ = ["StageServer", "model_from_checkpoint", "connect", "main",
           "STUB_HASH", "ENCODER_STAGES"]
