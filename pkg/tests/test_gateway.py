"""Gateway: replica routing, startup hash checks, fan-out timing, timeout
attribution, elastic scaling, and the client-facing listener."""

from __future__ import annotations

import threading
import time

import numpy as np
import pytest

from cmt.checkpoint import save_checkpoint
from cmt.encoders import encode_audio, encode_text, encode_visual
from cmt.errors import ServingError, StageTimeoutError
from cmt.fusion import CmtModel
from cmt.serving.bench import GatewayClient, bench_gateway, compare_sequential
from cmt.serving.config import serving_config_from_dict
from cmt.serving.gateway import Gateway, Replica, StagePool
from cmt.serving.wire import EncodeRequest, Error, MessageSocket

from conftest import tiny_config


def stub_cfg(visual_ms=1.0, acoustic_ms=1.0, textual_ms=1.0, fusion_ms=0.0,
             timeout_ms=5000.0, replicas=(1, 1, 1, 1), stub_dim=4,
             autoscaler=None) -> "ServingConfig":
    names = ("visual", "acoustic", "textual", "fusion")
    delays = (visual_ms, acoustic_ms, textual_ms, fusion_ms)
    gateway = {"timeout_ms": timeout_ms}
    if autoscaler is not None:
        gateway["autoscaler"] = autoscaler
    return serving_config_from_dict({
        "stages": [
            {"stage": n, "stub_delay_ms": d, "stub_dim": stub_dim,
             "replicas": r}
            for n, d, r in zip(names, delays, replicas)
        ],
        "gateway": gateway,
    })


def real_cfg(ckpt_path: str, timeout_ms=10000.0) -> "ServingConfig":
    return serving_config_from_dict({
        "stages": [{"stage": n, "checkpoint": ckpt_path}
                   for n in ("visual", "acoustic", "textual", "fusion")],
        "gateway": {"timeout_ms": timeout_ms},
    })


ZV = np.zeros((4, 4, 1))
ZA = np.zeros(12)
ZT = np.zeros(3)


@pytest.fixture(scope="module")
def real_gateway(tiny_checkpoint):
    path, _, _ = tiny_checkpoint
    with Gateway(real_cfg(path), mode="thread").start(listener=True) as gw:
        yield gw


class TestPoolRouting:
    """choose() policy in isolation, with inert replica records."""

    @staticmethod
    def pool_with(outstanding: list[int]) -> StagePool:
        from cmt.serving.config import StageConfig
        pool = StagePool(StageConfig(stage="visual", stub_delay_ms=0.0))
        for i, n in enumerate(outstanding):
            r = Replica("visual", i, "127.0.0.1", 0)
            r.outstanding = n
            pool.replicas.append(r)
        return pool

    def test_least_outstanding_wins(self):
        pool = self.pool_with([3, 1, 2])
        assert pool.choose().index == 1

    def test_tie_goes_to_lowest_index(self):
        pool = self.pool_with([2, 1, 1])
        assert pool.choose().index == 1

    def test_choose_increments_release_decrements(self):
        pool = self.pool_with([0, 0])
        first = pool.choose()
        assert first.index == 0 and first.outstanding == 1
        second = pool.choose()
        assert second.index == 1
        pool.release(first)
        assert first.outstanding == 0
        assert pool.queue_depth() == 1

    def test_draining_replicas_skipped(self):
        pool = self.pool_with([0, 5])
        pool.replicas[0].draining = True
        assert pool.choose().index == 1

    def test_no_live_replicas_is_an_error(self):
        pool = self.pool_with([0])
        pool.replicas[0].draining = True
        with pytest.raises(ServingError, match="no live replicas"):
            pool.choose()


class TestStartup:
    def test_replica_counts_honored(self):
        with Gateway(stub_cfg(replicas=(2, 1, 1, 3)), mode="thread").start() as gw:
            assert gw.replica_counts() == {
                "visual": 2, "acoustic": 1, "textual": 1, "fusion": 3}

    def test_mixed_checkpoints_refused(self, tiny_checkpoint, tmp_path):
        path_a, cfg, _ = tiny_checkpoint
        other = CmtModel.init(cfg, seed=99)
        path_b = str(tmp_path / "other.cmtc")
        save_checkpoint(path_b, {k: p.data for k, p in other.params.items()},
                        {"model": cfg.to_dict()})
        d = real_cfg(path_a)
        stages = [s if s.stage != "textual" else
                  type(s)(stage="textual", checkpoint=path_b)
                  for s in d.stages]
        bad = type(d)(stages=tuple(stages), gateway=d.gateway)
        with pytest.raises(ServingError, match="different runs") as exc:
            Gateway(bad, mode="thread").start()
        assert "textual" in str(exc.value)

    def test_stub_stages_do_not_poison_hash_check(self, tiny_checkpoint):
        from cmt.checkpoint import checkpoint_hash
        path, _, _ = tiny_checkpoint
        d = real_cfg(path)
        stages = [s if s.stage != "acoustic" else
                  type(s)(stage="acoustic", stub_delay_ms=1.0, stub_dim=4)
                  for s in d.stages]
        mixed = type(d)(stages=tuple(stages), gateway=d.gateway)
        with Gateway(mixed, mode="thread").start() as gw:
            assert gw.config_hash == checkpoint_hash(path)

    def test_process_replica_failure_names_stage(self, tmp_path):
        d = serving_config_from_dict({
            "stages": [
                {"stage": "visual", "checkpoint": str(tmp_path / "no.cmtc")},
                {"stage": "acoustic", "stub_delay_ms": 1},
                {"stage": "textual", "stub_delay_ms": 1},
                {"stage": "fusion", "stub_delay_ms": 1},
            ],
        })
        with pytest.raises(ServingError, match="visual"):
            Gateway(d, mode="process").start()


class TestInferEquivalence:
    def test_matches_in_process_model_bit_exact(self, real_gateway,
                                                tiny_checkpoint, tiny_dataset):
        _, cfg, model = tiny_checkpoint
        for sample in tiny_dataset.val[:3]:
            res = real_gateway.infer_sample(sample)
            zv = encode_visual(sample.visual, model.params, cfg)
            za = encode_audio(sample.audio, model.params, cfg)
            zt = encode_text(sample.text, model.params, cfg)
            want = model.forward_fused(zv, za, zt)
            assert res.probs.tobytes() == want.probs.data.tobytes()
            assert res.logits.tobytes() == want.logits.data.tobytes()
            assert res.argmax == want.argmax
            assert res.label == cfg.labels[want.argmax]

    def test_sequential_mode_same_answer(self, real_gateway, tiny_dataset):
        sample = tiny_dataset.val[0]
        conc = real_gateway.infer_sample(sample)
        seq = real_gateway.infer_sample(sample, sequential=True)
        assert np.array_equal(conc.probs, seq.probs)

    def test_latency_record_parts_are_sane(self, real_gateway, tiny_dataset):
        r = real_gateway.infer_sample(tiny_dataset.val[0]).record
        for v in (r.total_ms, r.visual_ms, r.audio_ms, r.text_ms,
                  r.fuse_ms, r.transport_ms):
            assert v >= 0.0
        assert r.total_ms >= r.fuse_ms
        assert r.total_ms >= max(r.visual_ms, r.audio_ms, r.text_ms)

    def test_stage_error_propagates_with_stage_name(self, real_gateway):
        with pytest.raises(ServingError, match="visual"):
            real_gateway.infer(np.zeros((2, 2, 1)), ZA, ZT)

    def test_custom_labels_get_default_directive(self, real_gateway,
                                                 tiny_dataset):
        from cmt.serving.adapt import DEFAULT_DIRECTIVE
        res = real_gateway.infer_sample(tiny_dataset.val[0])
        assert res.directive == DEFAULT_DIRECTIVE   # labels a/b/c


class TestFanout:
    def test_concurrent_encodes_overlap(self):
        with Gateway(stub_cfg(40.0, 40.0, 40.0, 0.0),
                     mode="thread").start() as gw:
            t0 = time.perf_counter()
            gw.infer(ZV, ZA, ZT)
            concurrent_ms = (time.perf_counter() - t0) * 1000
            t0 = time.perf_counter()
            gw.infer(ZV, ZA, ZT, sequential=True)
            sequential_ms = (time.perf_counter() - t0) * 1000
        assert sequential_ms >= 120.0          # three 40ms sleeps added up
        assert concurrent_ms < sequential_ms
        assert concurrent_ms < 90.0            # overlapped, not serialized

    def test_slowest_stage_dominates(self):
        with Gateway(stub_cfg(5.0, 60.0, 5.0, 0.0),
                     mode="thread").start() as gw:
            r = gw.infer(ZV, ZA, ZT).record
        assert r.audio_ms >= 60.0
        assert r.total_ms < 60.0 + 40.0   # visual/text hidden behind audio


class TestTimeout:
    def test_names_the_lagging_stage(self):
        with Gateway(stub_cfg(1.0, 300.0, 1.0, 0.0, timeout_ms=80.0),
                     mode="thread").start() as gw:
            with pytest.raises(StageTimeoutError) as exc:
                gw.infer(ZV, ZA, ZT)
            assert exc.value.stage == "acoustic"
            assert "acoustic" in str(exc.value)
            assert "80" in str(exc.value)

    def test_gateway_recovers_after_timeout(self):
        """The timed-out replica's connection is reset, not wedged."""
        with Gateway(stub_cfg(1.0, 300.0, 1.0, 0.0, timeout_ms=80.0),
                     mode="thread").start() as gw:
            for _ in range(2):
                with pytest.raises(StageTimeoutError) as exc:
                    gw.infer(ZV, ZA, ZT)
                assert exc.value.stage == "acoustic"


class TestScaling:
    def test_scale_up_and_down(self):
        with Gateway(stub_cfg(), mode="thread").start() as gw:
            assert gw.scale("fusion", "scale_up")
            assert gw.replica_counts()["fusion"] == 2
            assert gw.scale("fusion", "scale_down")
            assert gw.replica_counts()["fusion"] == 1

    def test_never_drains_the_last_replica(self):
        with Gateway(stub_cfg(), mode="thread").start() as gw:
            assert not gw.scale("visual", "scale_down")
            assert gw.replica_counts()["visual"] == 1

    def test_two_replicas_halve_a_serialized_backlog(self):
        cfg1 = stub_cfg(fusion_ms=0.0, acoustic_ms=0.0, textual_ms=0.0,
                        visual_ms=60.0)

        def two_concurrent(gw) -> float:
            barrier = threading.Barrier(2)
            times = []

            def one():
                barrier.wait()
                t0 = time.perf_counter()
                gw.infer(ZV, ZA, ZT)
                times.append(time.perf_counter() - t0)

            threads = [threading.Thread(target=one) for _ in range(2)]
            t0 = time.perf_counter()
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            return (time.perf_counter() - t0) * 1000

        with Gateway(cfg1, mode="thread").start() as gw:
            single = two_concurrent(gw)
            gw.scale("visual", "scale_up")
            doubled = two_concurrent(gw)
        assert single >= 110.0      # two 60ms sleeps on one connection
        assert doubled < single
        assert doubled < 110.0      # spread over two replicas

    def test_autoscaler_adds_then_removes_replicas(self):
        asc = {"enabled": True, "high_watermark": 0.5, "low_watermark_pct": 20,
               "cooldown_s": 0.4, "max_replicas": 2, "interval_s": 0.05}
        cfg = stub_cfg(visual_ms=0.0, acoustic_ms=0.0, textual_ms=0.0,
                       fusion_ms=50.0, autoscaler=asc)
        with Gateway(cfg, mode="thread").start() as gw:
            stop = threading.Event()

            def hammer():
                while not stop.is_set():
                    gw.infer(ZV, ZA, ZT)

            threads = [threading.Thread(target=hammer) for _ in range(4)]
            for t in threads:
                t.start()
            deadline = time.monotonic() + 5.0
            while time.monotonic() < deadline \
                    and gw.replica_counts()["fusion"] < 2:
                time.sleep(0.05)
            up_count = gw.replica_counts()["fusion"]
            stop.set()
            for t in threads:
                t.join()

            deadline = time.monotonic() + 5.0
            while time.monotonic() < deadline \
                    and gw.replica_counts()["fusion"] > 1:
                time.sleep(0.05)
            down_count = gw.replica_counts()["fusion"]
            log = list(gw.scaling_log)
        assert up_count == 2
        assert down_count == 1
        actions = [d.action for d in log]
        assert "scale_up" in actions
        assert "scale_down" in actions
        assert all(d.stage == "fusion" for d in log)


class TestClientListener:
    def test_health_reports_gateway_and_hash(self, real_gateway,
                                             tiny_checkpoint):
        from cmt.checkpoint import checkpoint_hash
        path, _, _ = tiny_checkpoint
        with GatewayClient(real_gateway.host, real_gateway.port) as client:
            h = client.health()
        assert h.stage == "gateway"
        assert h.config_hash == checkpoint_hash(path)

    def test_remote_infer_matches_local(self, real_gateway, tiny_dataset):
        sample = tiny_dataset.val[2]
        local = real_gateway.infer_sample(sample)
        with GatewayClient(real_gateway.host, real_gateway.port) as client:
            reply, record = client.infer_sample(sample)
        assert reply.probs.tobytes() == local.probs.tobytes()
        assert reply.label == local.label
        assert record.total_ms > 0.0
        assert reply.timings_ms[0] > 0.0    # gateway filled its timings

    def test_remote_error_propagates_reason(self, real_gateway):
        with GatewayClient(real_gateway.host, real_gateway.port) as client:
            with pytest.raises(ServingError, match="visual"):
                client.infer_arrays(np.zeros((9, 9, 1)), ZA, ZT)

    def test_unhandled_message_type_rejected(self, real_gateway):
        with MessageSocket.connect(real_gateway.host,
                                   real_gateway.port) as sock:
            sock.send(EncodeRequest(5, "visual", ZV))
            reply = sock.recv()
        assert isinstance(reply, Error)
        assert "cannot handle" in reply.reason


class TestBenchIntegration:
    def test_closed_loop_against_stub_gateway(self, tiny_dataset):
        with Gateway(stub_cfg(5.0, 5.0, 5.0, 0.0, stub_dim=3),
                     mode="thread").start() as gw:
            stats = bench_gateway(gw, tiny_dataset.val, num_requests=12,
                                  concurrency=3)
        assert stats.count == 12
        assert stats.mean_ms >= 5.0
        lines = stats.to_csv().strip().split("\n")
        assert len(lines) == 14    # header + 12 rows + summary

    def test_fanout_speedup_vs_sequential_baseline(self, tiny_dataset):
        with Gateway(stub_cfg(30.0, 30.0, 30.0, 0.0, stub_dim=3),
                     mode="thread").start() as gw:
            conc, seq, speedup = compare_sequential(
                gw, tiny_dataset.val, num_requests=6)
        assert seq.mean_ms >= 90.0
        assert conc.mean_ms < seq.mean_ms
        assert speedup > 1.5
