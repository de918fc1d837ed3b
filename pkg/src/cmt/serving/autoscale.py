"""Load-driven replica scaling policy.

The policy is a pure function of a window of load snapshots, so it can be
tested against synthetic traffic tables without running any servers:

* scale_up   — mean queue depth over the window exceeds the high watermark
               and the stage is below its replica cap;
* scale_down — the stage has been under-utilized (busy fraction below the
               low watermark) for at least the cooldown span, its queue is
               currently empty, and more than one replica is running;
* hold       — everything else, including degenerate (empty) windows.

Replica counts never leave [1, max_replicas], and a nonempty queue always
blocks scale-down.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import AutoscalerConfig


@dataclass(frozen=True)
class StageSnapshot:
    """One sampling tick of a stage's load."""
    t: float            # monotonic seconds
    queue_depth: int    # requests in flight or waiting, all replicas
    replicas: int

    @property
    def busy(self) -> bool:
        return self.queue_depth > 0


@dataclass(frozen=True)
class ScalingDecision:
    stage: str
    action: str               # scale_up | scale_down | hold
    reason: str
    mean_queue_depth: float
    utilization_pct: float
    replicas: int
    new_replicas: int

    def __post_init__(self):
        if self.action not in ("scale_up", "scale_down", "hold"):
            raise ValueError(f"unknown action {self.action!r}")


def decide(stage: str, window: list[StageSnapshot], replicas: int,
           cfg: AutoscalerConfig) -> ScalingDecision:
    """Scaling decision for ``stage`` given its recent load ``window``.

    ``window`` is ordered oldest-first. The queue-depth mean is taken over
    the whole window; the utilization test looks at the trailing
    ``cooldown_s`` span and requires the window to actually cover it.
    """
    def hold(reason: str, mean_q: float = 0.0, util: float = 0.0) -> ScalingDecision:
        return ScalingDecision(stage, "hold", reason, mean_q, util,
                               replicas, replicas)

    if not window:
        return hold("no load samples")

    mean_q = sum(s.queue_depth for s in window) / len(window)
    busy_frac = sum(1 for s in window if s.busy) / len(window)
    util = 100.0 * busy_frac

    if mean_q > cfg.high_watermark:
        if replicas < cfg.max_replicas:
            return ScalingDecision(
                stage, "scale_up",
                f"mean queue depth {mean_q:.2f} > {cfg.high_watermark:g}",
                mean_q, util, replicas, replicas + 1,
            )
        return hold(f"queue high but already at max {cfg.max_replicas} replicas",
                    mean_q, util)

    now = window[-1].t
    span = now - window[0].t
    if replicas > 1 and span >= cfg.cooldown_s:
        recent = [s for s in window if s.t >= now - cfg.cooldown_s]
        recent_util = 100.0 * sum(1 for s in recent if s.busy) / len(recent)
        if recent_util < cfg.low_watermark_pct and window[-1].queue_depth == 0:
            return ScalingDecision(
                stage, "scale_down",
                f"utilization {recent_util:.1f}% < {cfg.low_watermark_pct:g}% "
                f"for {cfg.cooldown_s:g}s and queue empty",
                mean_q, recent_util, replicas, replicas - 1,
            )

    return hold("within watermarks", mean_q, util)


__all__ = ["StageSnapshot", "ScalingDecision", "decide"]
