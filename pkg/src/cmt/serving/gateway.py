"""Request gateway: fan-out, replica routing, scaling, latency accounting.

The gateway owns every stage replica (spawned either as subprocesses or as
in-process server threads), checks at startup that all non-stub stages
serve checkpoints with the same hash, and for each inference request:

1. dispatches the three encode requests concurrently — one per encoder
   stage, each to the replica with the fewest outstanding requests (ties
   to the lowest replica index);
2. awaits all three embeddings, enforcing the per-stage timeout and naming
   the lagging stage on failure;
3. sends the fusion request, receives the distribution;
4. derives the adaptation directive and a per-request latency record.

A client listener speaks the same wire protocol: a FuseRequest carrying
the three *raw* modality tensors runs the full pipeline and returns a
FuseResponse whose timing block is filled with the gateway's measured
(total, visual, audio, text, fuse) milliseconds.

Locking discipline: routing state (outstanding counts, replica lists) is
touched only under the owning pool's lock, and no lock is held across a

network wait.
"""

from __future__ import annotations

import itertools
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, CmtError, ServingError, StageTimeoutError
from .adapt import DEFAULT_DIRECTIVE, DIRECTIVE_TABLE, AdaptationDirective
from .autoscale import ScalingDecision, StageSnapshot, decide
from .bench import LatencyRecord
from .config import ENCODER_STAGES, ServingConfig, StageConfig, parse_listen
from .stage import STUB_HASH, StageServer
from .wire import (
    ConnectionClosed,
    EncodeRequest,
    EncodeResponse,
    Error,
    FuseRequest,
    FuseResponse,
    Health,
    MessageSocket,
    StreamDecoder,
    WireFormatError,
    encode_message,
)

SPAWN_TIMEOUT_S = 30.0


class Replica:
    """One running stage service plus the gateway's connection to it."""

    def __init__(self, stage: str, index: int, host: str, port: int,
                 process: subprocess.Popen | None = None,
                 server: StageServer | None = None):
        self.stage = stage
        self.index = index
        self.host = host
        self.port = port
        self.process = process
        self.server = server
        self.lock = threading.Lock()     # serializes wire send/recv
        self.outstanding = 0             # guarded by the pool lock
        self.draining = False            # guarded by the pool lock
        self._conn: MessageSocket | None = None

    def conn(self) -> MessageSocket:
        if self._conn is None:
            self._conn = MessageSocket.connect(self.host, self.port)
        return self._conn

    def reset_conn(self) -> None:
        """Drop the connection (after a timeout the stream may hold a stale
        reply, so framing per request id can no longer be trusted)."""
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def stop(self) -> None:
        self.reset_conn()
        if self.server is not None:
            self.server.close()
        if self.process is not None:
            self.process.terminate()
            try:
                self.process.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.process.kill()
                self.process.wait(timeout=5)


class StagePool:
    """Replicas of one stage plus routing state."""

    def __init__(self, cfg: StageConfig):
        self.cfg = cfg
        self.stage = cfg.stage
        self.lock = threading.Lock()
        self.replicas: list[Replica] = []
        self.next_index = 0

    def choose(self) -> Replica:
        """Least outstanding requests, ties to lowest replica index."""
        with self.lock:
            candidates = [r for r in self.replicas if not r.draining]
            if not candidates:
                raise ServingError(f"stage {self.stage} has no live replicas")
            best = min(candidates, key=lambda r: (r.outstanding, r.index))
            best.outstanding += 1
            return best

    def release(self, replica: Replica) -> None:
        with self.lock:
            replica.outstanding -= 1

    def queue_depth(self) -> int:
        with self.lock:
            return sum(r.outstanding for r in self.replicas)

    def replica_count(self) -> int:
        with self.lock:
            return len(self.replicas)


@dataclass
class InferResult:
    probs: np.ndarray
    logits: np.ndarray
    argmax: int
    label: str
    directive: AdaptationDirective
    record: LatencyRecord


class Gateway:
    """Pipeline supervisor and request router.

    ``mode`` selects how replicas run: "process" spawns one worker process
    per replica (isolated, as deployed); "thread" runs StageServer threads
    in-process (fast startup, used by tests). The wire protocol and routing
    logic are identical in both modes.
    """

    def __init__(self, cfg: ServingConfig, mode: str = "process",
                 log=None):
        if mode not in ("process", "thread"):
            raise ConfigError(f"unknown gateway mode {mode!r}")
        self.cfg = cfg
        self.mode = mode
        self.timeout_s = cfg.gateway.timeout_ms / 1000.0
        self.pools = {s.stage: StagePool(s) for s in cfg.stages}
        self.config_hash = ""
        self.scaling_log: list[ScalingDecision] = []
        self._log = log or (lambda line: None)
        self._rid = itertools.count(1)
        self._rid_lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=16,
                                            thread_name_prefix="gw-encode")
        self._listener = None
        self.host: str | None = None
        self.port: int | None = None
        self._stop = threading.Event()
        self._scaler_thread: threading.Thread | None = None
        self._windows: dict[str, list[StageSnapshot]] = {
            s.stage: [] for s in cfg.stages
        }

    # -- lifecycle -----------------------------------------------------------

    def start(self, listener: bool = False) -> "Gateway":
        try:
            for pool in self.pools.values():
                for _ in range(pool.cfg.replicas):
                    self._add_replica(pool)
            self._check_config_hashes()
        except BaseException:
            self.close()
            raise
        if listener:
            self._start_listener()
        if self.cfg.gateway.autoscaler.enabled:
            self._scaler_thread = threading.Thread(
                target=self._autoscale_loop, name="gw-autoscaler", daemon=True)
            self._scaler_thread.start()
        return self

    def close(self) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for pool in self.pools.values():
            with pool.lock:
                replicas = list(pool.replicas)
                pool.replicas.clear()
            for r in replicas:
                r.stop()
        self._executor.shutdown(wait=False, cancel_futures=True)

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- replica management ---------------------------------------------------

    def _spawn(self, scfg: StageConfig, index: int) -> Replica:
        host, base_port = parse_listen(scfg.listen)
        port = 0 if base_port == 0 else base_port + index
        if self.mode == "thread":
            server = StageServer(
                stage=scfg.stage, checkpoint=scfg.checkpoint,
                host=host, port=port, max_inflight=scfg.max_inflight,
                stub_delay_ms=scfg.stub_delay_ms, stub_dim=scfg.stub_dim,
            ).start()
            return Replica(scfg.stage, index, server.host, server.port,
                           server=server)
        cmd = [
            sys.executable, "-m", "cmt.serving.worker",
            "--stage", scfg.stage, "--host", host, "--port", str(port),
            "--max-inflight", str(scfg.max_inflight),
            "--stub-dim", str(scfg.stub_dim),
        ]
        if scfg.checkpoint is not None:
            cmd += ["--checkpoint", scfg.checkpoint]
        if scfg.stub_delay_ms is not None:
            cmd += ["--stub-delay-ms", str(scfg.stub_delay_ms)]
        proc = subprocess.Popen(cmd, stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, text=True)
        killer = threading.Timer(SPAWN_TIMEOUT_S, proc.kill)
        killer.start()
        try:
            line = proc.stdout.readline()
        finally:
            killer.cancel()
        if not line.startswith("PORT "):
            err = proc.stderr.read() if proc.poll() is not None else ""
            proc.kill()
            raise ServingError(
                f"stage {scfg.stage} replica {index} failed to start: "
                f"{err.strip() or line.strip() or 'no port line'}"
            )
        actual_port = int(line.split()[1])
        return Replica(scfg.stage, index, host, actual_port, process=proc)

    def _add_replica(self, pool: StagePool) -> Replica:
        with pool.lock:
            index = pool.next_index
            pool.next_index += 1
        replica = self._spawn(pool.cfg, index)
        with pool.lock:
            pool.replicas.append(replica)
        return replica

    def _remove_replica(self, pool: StagePool) -> bool:
        """Drain and stop the highest-index replica; keeps at least one."""
        with pool.lock:
            live = [r for r in pool.replicas if not r.draining]
            if len(live) <= 1:
                return False
            victim = max(live, key=lambda r: r.index)
            victim.draining = True
        deadline = time.monotonic() + self.timeout_s
        while time.monotonic() < deadline:
            with pool.lock:
                if victim.outstanding == 0:
                    break
            time.sleep(0.01)
        with pool.lock:
            pool.replicas.remove(victim)
        victim.stop()
        return True

    def _check_config_hashes(self) -> None:
        """Every replica must be healthy; every non-stub stage must serve
        the same checkpoint hash."""
        hashes: dict[str, str] = {}
        for pool in self.pools.values():
            with pool.lock:
                replicas = list(pool.replicas)
            for replica in replicas:
                reply = self._roundtrip(pool, replica, Health(self._next_rid()))
                if not isinstance(reply, Health):
                    raise ServingError(
                        f"stage {pool.stage} replica {replica.index} health "
                        f"check returned {type(reply).__name__}")
                if reply.stage != pool.stage:
                    raise ServingError(
                        f"replica at {replica.host}:{replica.port} identifies "
                        f"as {reply.stage!r}, expected {pool.stage!r}")
                prev = hashes.setdefault(pool.stage, reply.config_hash)
                if prev != reply.config_hash:
                    raise ServingError(
                        f"stage {pool.stage} replicas disagree on checkpoint "
                        f"hash ({prev[:12]} vs {reply.config_hash[:12]})")
        real = {s: h for s, h in hashes.items() if h != STUB_HASH}
        if len(set(real.values())) > 1:
            detail = ", ".join(f"{s}={h[:12]}" for s, h in sorted(real.items()))
            raise ServingError(
                f"stages serve checkpoints from different runs: {detail}")
        self.config_hash = next(iter(set(real.values())), STUB_HASH)

    # -- request path ----------------------------------------------------------

    def _next_rid(self) -> int:
        with self._rid_lock:
            return next(self._rid)

    def _roundtrip(self, pool: StagePool, replica: Replica, msg) -> object:
        """Send one message on a replica's connection and await its reply."""
        try:
            with replica.lock:
                conn = replica.conn()
                conn.send(msg)
                while True:
                    reply = conn.recv(timeout=self.timeout_s)
                    if reply.request_id == msg.request_id:
                        return reply
                    # stale reply from an earlier timed-out request: skip
        except TimeoutError:
            replica.reset_conn()
            raise StageTimeoutError(
                f"stage {pool.stage} timed out after "
                f"{self.cfg.gateway.timeout_ms:g} ms",
                stage=pool.stage) from None
        except (ConnectionClosed, WireFormatError, OSError) as e:
            replica.reset_conn()
            raise ServingError(
                f"stage {pool.stage} connection failed: {e}") from e

    def _call(self, stage: str, msg) -> tuple[object, float]:
        """Route to a replica; returns (reply, milliseconds)."""
        pool = self.pools[stage]
        replica = pool.choose()
        t0 = time.perf_counter()
        try:
            reply = self._roundtrip(pool, replica, msg)
        finally:
            pool.release(replica)
        ms = (time.perf_counter() - t0) * 1000.0
        if isinstance(reply, Error):
            raise ServingError(f"stage {stage} replied: {reply.reason}")
        return reply, ms

    def _encode(self, stage: str, tensor: np.ndarray,
                rid: int) -> tuple[np.ndarray, float]:
        reply, ms = self._call(stage, EncodeRequest(rid, stage, tensor))
        if not isinstance(reply, EncodeResponse):
            raise ServingError(
                f"stage {stage} returned {type(reply).__name__} to an "
                f"encode request")
        return reply.embedding, ms

    def infer(self, visual: np.ndarray, audio: np.ndarray, text: np.ndarray,
              sequential: bool = False) -> InferResult:
        """Full pipeline on raw modality tensors.

        Encoder dispatch is concurrent unless ``sequential`` — the
        benchmark baseline that calls the three encoders one after another.
        """
        rid = self._next_rid()
        inputs = {"visual": visual, "acoustic": audio, "textual": text}
        t0 = time.perf_counter()
        if sequential:
            results = {s: self._encode(s, inputs[s], rid)
                       for s in ENCODER_STAGES}
        else:
            futures = {
                s: self._executor.submit(self._encode, s, inputs[s], rid)
                for s in ENCODER_STAGES
            }
            results = {s: f.result() for s, f in futures.items()}
        (zv, v_ms), (za, a_ms), (zt, t_ms) = (results[s] for s in ENCODER_STAGES)

        reply, fuse_ms = self._call("fusion", FuseRequest(rid, zv, za, zt))
        if not isinstance(reply, FuseResponse):
            raise ServingError(
                f"fusion stage returned {type(reply).__name__}")
        total_ms = (time.perf_counter() - t0) * 1000.0
        encode_span = (v_ms + a_ms + t_ms) if sequential else max(v_ms, a_ms, t_ms)
        record = LatencyRecord(
            request_id=rid,
            total_ms=total_ms,
            visual_ms=v_ms,
            audio_ms=a_ms,
            text_ms=t_ms,
            fuse_ms=fuse_ms,
            transport_ms=max(0.0, total_ms - encode_span - fuse_ms),
        )
        directive = DIRECTIVE_TABLE.get(reply.label, DEFAULT_DIRECTIVE)
        return InferResult(
            probs=reply.probs, logits=reply.logits, argmax=reply.argmax,
            label=reply.label, directive=directive, record=record,
        )

    def infer_sample(self, sample, sequential: bool = False) -> InferResult:
        """Pipeline on a dataset sample (visual frame, waveform, tokens)."""
        return self.infer(
            sample.visual.pixels,
            sample.audio.samples,
            np.array(sample.text.token_ids, dtype=np.float64),
            sequential=sequential,
        )

    # -- load metrics and scaling ------------------------------------------------

    def queue_depths(self) -> dict[str, int]:
        return {stage: pool.queue_depth() for stage, pool in self.pools.items()}

    def replica_counts(self) -> dict[str, int]:
        return {stage: pool.replica_count() for stage, pool in self.pools.items()}

    def scale(self, stage: str, action: str) -> bool:
        pool = self.pools[stage]
        if action == "scale_up":
            self._add_replica(pool)
            return True
        if action == "scale_down":
            return self._remove_replica(pool)
        return False

    def _autoscale_loop(self) -> None:
        asc = self.cfg.gateway.autoscaler
        keep_s = max(2 * asc.cooldown_s, 30.0)
        while not self._stop.wait(asc.interval_s):
            now = time.monotonic()
            for stage, pool in self.pools.items():
                window = self._windows[stage]
                window.append(StageSnapshot(now, pool.queue_depth(),
                                            pool.replica_count()))
                while window and window[0].t < now - keep_s:
                    window.pop(0)
                decision = decide(stage, window, pool.replica_count(), asc)
                if decision.action == "hold":
                    continue
                if decision.action == "scale_up" \
                        and pool.replica_count() >= asc.max_replicas:
                    continue
                applied = self.scale(stage, decision.action)
                if applied:
                    self.scaling_log.append(decision)
                    self._log(f"[autoscale] {stage}: {decision.action} -> "
                              f"{decision.new_replicas} ({decision.reason})")
                    if decision.action == "scale_down":
                        # fresh observation period after a change
                        window.clear()

    # -- client listener ------------------------------------------------------

    def _start_listener(self) -> None:
        import socket as socket_mod
        host, port = parse_listen(self.cfg.gateway.listen)
        self._listener = socket_mod.create_server((host, port), backlog=64)
        self.host, self.port = self._listener.getsockname()[:2]
        threading.Thread(target=self._accept_loop, name="gw-accept",
                         daemon=True).start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_client, args=(conn,),
                             name="gw-client", daemon=True).start()

    def _serve_client(self, conn) -> None:
        decoder = StreamDecoder()
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
                    try:
                        conn.sendall(encode_message(
                            Error(0, f"{type(e).__name__}: {e}")))
                    except OSError:
                        pass
                    return
                for msg in messages:
                    reply = self._client_reply(msg)
                    try:
                        conn.sendall(encode_message(reply))
                    except OSError:
                        return
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _client_reply(self, msg):
        rid = msg.request_id
        if isinstance(msg, Health):
            return Health(rid, stage="gateway", config_hash=self.config_hash)
        if isinstance(msg, FuseRequest):
            try:
                result = self.infer(msg.z_visual, msg.z_audio, msg.z_text,
                                    sequential=msg.sequential)
            except CmtError as e:
                return Error(rid, f"{type(e).__name__}: {e}")
            r = result.record
            return FuseResponse(
                rid, result.probs, result.logits, result.argmax, result.label,
                np.array([r.total_ms, r.visual_ms, r.audio_ms, r.text_ms,
                          r.fuse_ms]),
            )
        return Error(rid, f"gateway cannot handle {type(msg).__name__}")


__all__ = ["Gateway", "Replica", "StagePool", "InferResult", "SPAWN_TIMEOUT_S"]
