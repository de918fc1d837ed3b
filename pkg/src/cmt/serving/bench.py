"""Latency accounting and load generation for the serving pipeline.

Per-request breakdown: total wall time, per-encoder time, fusion time, and
transport (everything not attributed to a stage — dispatch, sync, wire).
Percentiles use the nearest-rank method on sorted totals. The CSV report
has one row per request plus ``#``-prefixed summary lines so a plain CSV
reader can skip them.

Two load shapes:

- closed loop: N worker threads each keep exactly one request in flight,
  looping until a request quota or a deadline is hit;
- open loop: requests dispatched at a fixed rate regardless of completions
  (backlog reveals saturation).

``compare_sequential`` measures the concurrency benefit of fan-out by
running the same workload with encoders called one after another versus
all three at once.
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..errors import InputError, ServingError
from .wire import FuseRequest, FuseResponse, Health, MessageSocket

CSV_HEADER = "request_id,total_ms,visual_ms,audio_ms,text_ms,fuse_ms,transport_ms"


@dataclass(frozen=True)
class LatencyRecord:
    """Millisecond breakdown of one request, measured at the caller."""

    request_id: int
    total_ms: float
    visual_ms: float
    audio_ms: float
    text_ms: float
    fuse_ms: float
    transport_ms: float

    @classmethod
    def from_parts(cls, request_id: int, total_ms: float, visual_ms: float,
                   audio_ms: float, text_ms: float, fuse_ms: float,
                   sequential: bool = False) -> "LatencyRecord":
        """Derive transport as the remainder of total after stage time.

        Concurrent encodes overlap, so only the slowest one occupies the
        critical path; sequential encodes add up.
        """
        encode_span = (visual_ms + audio_ms + text_ms) if sequential \
            else max(visual_ms, audio_ms, text_ms)
        transport = max(0.0, total_ms - encode_span - fuse_ms)
        return cls(request_id, total_ms, visual_ms, audio_ms, text_ms,
                   fuse_ms, transport)

    def csv_row(self) -> str:
        return ",".join([str(self.request_id)] + [
            f"{v:.1f}" for v in (self.total_ms, self.visual_ms, self.audio_ms,
                                 self.text_ms, self.fuse_ms, self.transport_ms)
        ])


def percentile_nearest_rank(sorted_values: list[float], pct: float) -> float:
    """Nearest-rank percentile: value at index ceil(p/100 * n) (1-based)."""
    if not sorted_values:
        raise InputError("percentile of an empty sample")
    if not 0.0 < pct <= 100.0:
        raise InputError(f"percentile must be in (0, 100], got {pct}")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


class LatencyStats:
    """Aggregate view over a set of latency records."""

    def __init__(self, records: list[LatencyRecord], elapsed_s: float,
                 failures: int = 0, incomplete: bool = False):
        self.records = list(records)
        self.elapsed_s = elapsed_s
        self.failures = failures
        self.incomplete = incomplete
        self._sorted_totals = sorted(r.total_ms for r in self.records)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def mean_ms(self) -> float:
        if not self.records:
            return 0.0
        return sum(self._sorted_totals) / len(self._sorted_totals)

    def percentile_ms(self, pct: float) -> float:
        return percentile_nearest_rank(self._sorted_totals, pct)

    @property
    def p50_ms(self) -> float:
        return self.percentile_ms(50)

    @property
    def p95_ms(self) -> float:
        return self.percentile_ms(95)

    @property
    def p99_ms(self) -> float:
        return self.percentile_ms(99)

    @property
    def throughput_rps(self) -> float:
        if self.elapsed_s <= 0.0:
            return 0.0
        return len(self.records) / self.elapsed_s

    def summary(self) -> str:
        if not self.records:
            return (f"requests=0 failures={self.failures} "
                    f"elapsed_s={self.elapsed_s:.2f}")
        flags = " INCOMPLETE" if self.incomplete else ""
        return (f"requests={self.count} failures={self.failures} "
                f"mean_ms={self.mean_ms:.1f} p50_ms={self.p50_ms:.1f} "
                f"p95_ms={self.p95_ms:.1f} p99_ms={self.p99_ms:.1f} "
                f"throughput_rps={self.throughput_rps:.1f}"
                f"{flags}")

    def to_csv(self, include_summary: bool = True) -> str:
        lines = [CSV_HEADER]
        lines.extend(r.csv_row() for r in self.records)
        if include_summary:
            lines.append(f"# {self.summary()}")
        return "\n".join(lines) + "\n"


# -- load generation -----------------------------------------------------------


def run_closed_loop(send, num_requests: int | None = None,
                    duration_s: float | None = None,
                    concurrency: int = 1,
                    stop_on_error: bool = True) -> LatencyStats:
    """Drive ``send(worker_index, sequence_number) -> LatencyRecord`` from
    ``concurrency`` threads, each with one request in flight at a time."""
    if num_requests is None and duration_s is None:
        raise InputError("closed loop needs a request quota or a duration")
    if concurrency < 1:
        raise InputError(f"concurrency must be >= 1, got {concurrency}")
    records: list[LatencyRecord] = []
    errors: list[BaseException] = []
    lock = threading.Lock()
    counter = iter(range(10**12))
    deadline = None if duration_s is None else time.monotonic() + duration_s
    stop = threading.Event()

    def take() -> int | None:
        with lock:
            seq = next(counter)
        if num_requests is not None and seq >= num_requests:
            return None
        if deadline is not None and time.monotonic() >= deadline:
            return None
        return seq

    def worker(index: int) -> None:
        while not stop.is_set():
            seq = take()
            if seq is None:
                return
            try:
                record = send(index, seq)
            except Exception as e:  # noqa: BLE001 - reported via stats
                with lock:
                    errors.append(e)
                if stop_on_error:
                    stop.set()
                    return
                continue
            with lock:
                records.append(record)

    t0 = time.monotonic()
    threads = [threading.Thread(target=worker, args=(i,), daemon=True)
               for i in range(concurrency)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.monotonic() - t0
    if errors and stop_on_error:
        raise ServingError(f"benchmark aborted after {len(records)} requests: "
                           f"{errors[0]}") from errors[0]
    records.sort(key=lambda r: r.request_id)
    return LatencyStats(records, elapsed, failures=len(errors),
                        incomplete=bool(errors))


def run_open_loop(send, rate_rps: float, duration_s: float,
                  max_inflight: int = 64) -> LatencyStats:
    """Dispatch ``send(worker_index, sequence_number)`` at a fixed rate.

    Arrivals are paced by the clock, not by completions; if the pipeline
    cannot keep up, in-flight work accumulates up to ``max_inflight`` and
    further arrivals are dropped and counted as failures.
    """
    if rate_rps <= 0.0 or duration_s <= 0.0:
        raise InputError("open loop needs a positive rate and duration")
    records: list[LatencyRecord] = []
    errors: list[BaseException] = []
    lock = threading.Lock()
    pool = ThreadPoolExecutor(max_workers=max_inflight,
                              thread_name_prefix="bench-open")
    inflight = threading.Semaphore(max_inflight)
    interval = 1.0 / rate_rps

    def fire(seq: int) -> None:
        try:
            record = send(seq % max_inflight, seq)
            with lock:
                records.append(record)
        except Exception as e:  # noqa: BLE001 - reported via stats
            with lock:
                errors.append(e)
        finally:
            inflight.release()

    t0 = time.monotonic()
    seq = 0
    dropped = 0
    while True:
        target = t0 + seq * interval
        now = time.monotonic()
        if now - t0 >= duration_s:
            break
        if target > now:
            time.sleep(min(target - now, 0.05))
            continue
        if inflight.acquire(blocking=False):
            pool.submit(fire, seq)
        else:
            dropped += 1
        seq += 1
    pool.shutdown(wait=True)
    elapsed = time.monotonic() - t0
    records.sort(key=lambda r: r.request_id)
    return LatencyStats(records, elapsed, failures=len(errors) + dropped,
                        incomplete=bool(errors) or dropped > 0)


# -- remote client --------------------------------------------------------------


class GatewayClient:
    """One client connection to a running gateway.

    Not thread-safe: a load generator gives each worker its own client.
    """

    def __init__(self, host: str, port: int, timeout_s: float = 30.0):
        self.timeout_s = timeout_s
        self._sock = MessageSocket.connect(host, port, timeout=timeout_s)
        self._rid = 0

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "GatewayClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _next_rid(self) -> int:
        self._rid += 1
        return self._rid

    def health(self) -> Health:
        rid = self._next_rid()
        self._sock.send(Health(rid))
        reply = self._sock.recv(timeout=self.timeout_s)
        if not isinstance(reply, Health):
            raise ServingError(f"gateway health check returned "
                               f"{type(reply).__name__}")
        return reply

    def infer_arrays(self, visual: np.ndarray, audio: np.ndarray,
                     text: np.ndarray,
                     sequential: bool = False) -> tuple[FuseResponse, LatencyRecord]:
        """Run the pipeline remotely; returns the reply plus a latency
        record whose total is the client-observed wall time."""
        rid = self._next_rid()
        t0 = time.perf_counter()
        self._sock.send(FuseRequest(rid, np.asarray(visual, dtype=np.float64),
                                    np.asarray(audio, dtype=np.float64),
                                    np.asarray(text, dtype=np.float64),
                                    sequential=sequential))
        reply = self._sock.recv(timeout=self.timeout_s)
        total_ms = (time.perf_counter() - t0) * 1000.0
        if isinstance(reply, FuseResponse):
            _, v_ms, a_ms, t_ms, f_ms = reply.timings_ms
            record = LatencyRecord.from_parts(rid, total_ms, v_ms, a_ms, t_ms,
                                              f_ms, sequential=sequential)
            return reply, record
        if hasattr(reply, "reason"):
            raise ServingError(f"gateway replied: {reply.reason}")
        raise ServingError(f"gateway returned {type(reply).__name__}")

    def infer_sample(self, sample,
                     sequential: bool = False) -> tuple[FuseResponse, LatencyRecord]:
        return self.infer_arrays(
            sample.visual.pixels, sample.audio.samples,
            np.array(sample.text.token_ids, dtype=np.float64),
            sequential=sequential,
        )


def bench_remote(host: str, port: int, samples, num_requests: int,
                 concurrency: int = 1, sequential: bool = False,
                 timeout_s: float = 30.0, warmup: int = 2) -> LatencyStats:
    """Closed-loop benchmark against a gateway listener.

    Each worker thread owns one connection and fires ``warmup`` unrecorded
    requests right after connecting; measured requests walk the sample
    list round-robin so runs of equal length exercise identical inputs.
    """
    if not samples:
        raise InputError("benchmark needs at least one sample")
    clients: dict[int, GatewayClient] = {}
    clients_lock = threading.Lock()

    def send(worker: int, seq: int) -> LatencyRecord:
        with clients_lock:
            client = clients.get(worker)
        if client is None:
            client = GatewayClient(host, port, timeout_s=timeout_s)
            with clients_lock:
                clients[worker] = client
            for k in range(warmup):
                client.infer_sample(samples[k % len(samples)],
                                    sequential=sequential)
        sample = samples[seq % len(samples)]
        _, record = client.infer_sample(sample, sequential=sequential)
        return record

    try:
        return run_closed_loop(send, num_requests=num_requests,
                               concurrency=concurrency)
    finally:
        with clients_lock:
            for client in clients.values():
                client.close()


def bench_gateway(gateway, samples, num_requests: int, concurrency: int = 1,
                  sequential: bool = False, warmup: int = 2) -> LatencyStats:
    """Closed-loop benchmark calling a Gateway object in-process.

    ``warmup`` unrecorded requests are sent first so one-time costs
    (kernel warmup, lazy connections) do not land in the measured window.
    """
    if not samples:
        raise InputError("benchmark needs at least one sample")
    for k in range(warmup):
        gateway.infer_sample(samples[k % len(samples)], sequential=sequential)

    def send(worker: int, seq: int) -> LatencyRecord:
        sample = samples[seq % len(samples)]
        return gateway.infer_sample(sample, sequential=sequential).record

    return run_closed_loop(send, num_requests=num_requests,
                           concurrency=concurrency)


def compare_sequential(gateway, samples, num_requests: int,
                       concurrency: int = 1,
                       warmup: int = 2) -> tuple[LatencyStats, LatencyStats, float]:
    """(concurrent stats, sequential stats, mean-latency speedup)."""
    concurrent = bench_gateway(gateway, samples, num_requests,
                               concurrency=concurrency, sequential=False,
                               warmup=warmup)
    sequential = bench_gateway(gateway, samples, num_requests,
                               concurrency=concurrency, sequential=True,
                               warmup=warmup)
    speedup = sequential.mean_ms / concurrent.mean_ms \
        if concurrent.mean_ms > 0 else float("inf")
    return concurrent, sequential, speedup


__all__ = [
    "CSV_HEADER", "LatencyRecord", "LatencyStats", "GatewayClient",
    "percentile_nearest_rank", "run_closed_loop", "run_open_loop",
    "bench_remote", "bench_gateway", "compare_sequential",
]
