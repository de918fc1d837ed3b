"""Serving topology configuration: stage processes, gateway, autoscaler.

On-disk form is one UTF-8 JSON file:

    {
      "stages": [
        {"stage": "visual",  "checkpoint": "run/model.cmtc", "replicas": 1,
         "listen": "127.0.0.1:0", "max_inflight": 8},
        ... one entry per stage: visual, acoustic, textual, fusion ...
      ],
      "gateway": {
        "listen": "127.0.0.1:0",
        "timeout_ms": 2000,
        "autoscaler": {"enabled": false, "high_watermark": 4,
                        "low_watermark_pct": 20, "cooldown_s": 10,
                        "max_replicas": 4, "interval_s": 0.5}
      }
    }

A stage entry may set ``stub_delay_ms`` (and optionally ``stub_dim``)
instead of a checkpoint: the stage then sleeps that long per request and
returns canned zeros — used for latency and scaling tests without model
compute. Port 0 means each replica binds an ephemeral port.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ConfigError

STAGE_NAMES = ("visual", "acoustic", "textual", "fusion")
ENCODER_STAGES = ("visual", "acoustic", "textual")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    checkpoint: str | None = None
    replicas: int = 1
    listen: str = "127.0.0.1:0"
    max_inflight: int = 8
    stub_delay_ms: float | None = None
    stub_dim: int = 32

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise ConfigError(
                f"unknown stage {self.stage!r}; expected one of {STAGE_NAMES}"
            )
        if self.replicas < 1:
            raise ConfigError(f"stage {self.stage}: replicas must be >= 1")
        if self.max_inflight < 1:
            raise ConfigError(f"stage {self.stage}: max_inflight must be >= 1")
        if self.checkpoint is None and self.stub_delay_ms is None:
            raise ConfigError(
                f"stage {self.stage}: needs a checkpoint or stub_delay_ms"
            )
        if self.stub_delay_ms is not None and self.stub_delay_ms < 0:
            raise ConfigError(f"stage {self.stage}: stub delay must be >= 0")
        if self.stub_dim < 1:
            raise ConfigError(f"stage {self.stage}: stub_dim must be >= 1")
        parse_listen(self.listen)

    @property
    def is_stub(self) -> bool:
        return self.stub_delay_ms is not None


@dataclass(frozen=True)
class AutoscalerConfig:
    enabled: bool = False
    high_watermark: float = 4.0
    low_watermark_pct: float = 20.0
    cooldown_s: float = 10.0
    max_replicas: int = 4
    interval_s: float = 0.5

    def __post_init__(self):
        if self.high_watermark <= 0:
            raise ConfigError("high_watermark must be > 0")
        if not 0 < self.low_watermark_pct < 100:
            raise ConfigError("low_watermark_pct must be in (0, 100)")
        if self.cooldown_s <= 0 or self.interval_s <= 0:
            raise ConfigError("cooldown_s and interval_s must be > 0")
        if self.max_replicas < 1:
            raise ConfigError("max_replicas must be >= 1")


@dataclass(frozen=True)
class GatewayConfig:
    listen: str = "127.0.0.1:0"
    timeout_ms: float = 2000.0
    autoscaler: AutoscalerConfig = field(default_factory=AutoscalerConfig)

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ConfigError("timeout_ms must be > 0")
        parse_listen(self.listen)


@dataclass(frozen=True)
class ServingConfig:
    stages: tuple[StageConfig, ...]
    gateway: GatewayConfig = field(default_factory=GatewayConfig)

    def __post_init__(self):
        names = [s.stage for s in self.stages]
        if sorted(names) != sorted(STAGE_NAMES):
            raise ConfigError(
                f"need exactly one entry per stage {STAGE_NAMES}, got {names}"
            )

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.stage == name:
                return s
        raise ConfigError(f"no stage named {name!r}")


def parse_listen(listen: str) -> tuple[str, int]:
    """Split ``host:port``; port may be 0 for ephemeral."""
    host, sep, port_s = listen.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"listen address {listen!r} is not host:port")
    try:
        port = int(port_s)
    except ValueError:
        raise ConfigError(f"listen port {port_s!r} is not an integer") from None
    if not 0 <= port <= 65535:
        raise ConfigError(f"listen port {port} outside 0..65535")
    return host, port


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def serving_config_from_dict(raw: dict[str, Any]) -> ServingConfig:
    _check_keys(raw, {"stages", "gateway"}, "serving config")
    if "stages" not in raw or not isinstance(raw["stages"], list):
        raise ConfigError("serving config needs a 'stages' list")
    stage_fields = set(StageConfig.__dataclass_fields__)
    stages = []
    for entry in raw["stages"]:
        _check_keys(entry, stage_fields, "stage")
        stages.append(StageConfig(**entry))
    gw_raw = dict(raw.get("gateway", {}))
    _check_keys(gw_raw, set(GatewayConfig.__dataclass_fields__), "gateway")
    if "autoscaler" in gw_raw:
        asc_raw = dict(gw_raw["autoscaler"])
        _check_keys(asc_raw, set(AutoscalerConfig.__dataclass_fields__), "autoscaler")
        gw_raw["autoscaler"] = AutoscalerConfig(**asc_raw)
    return ServingConfig(stages=tuple(stages), gateway=GatewayConfig(**gw_raw))


def load_serving_config(path: str | Path) -> ServingConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no serving config at {p}")
    try:
        raw = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"serving config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("serving config must be a JSON object")
    return serving_config_from_dict(raw)


__all__ = [
    "STAGE_NAMES", "ENCODER_STAGES",
    "StageConfig", "AutoscalerConfig", "GatewayConfig", "ServingConfig",
    "parse_listen", "serving_config_from_dict", "load_serving_config",
]
