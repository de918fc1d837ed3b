"""Multi-process serving: binary wire protocol, stage services, gateway
fan-out, adaptation directives, elastic replica scaling, and benchmarking."""

from .adapt import DIRECTIVE_TABLE, AdaptationDirective, adapt_response
from .autoscale import ScalingDecision, StageSnapshot, decide
from .bench import (
    GatewayClient,
    LatencyRecord,
    LatencyStats,
    bench_gateway,
    bench_remote,
    compare_sequential,
)
from .config import (
    AutoscalerConfig,
    GatewayConfig,
    ServingConfig,
    StageConfig,
    load_serving_config,
    serving_config_from_dict,
)
from .gateway import Gateway, InferResult
from .stage import StageServer

__all__ = [
    "AdaptationDirective", "adapt_response", "DIRECTIVE_TABLE",
    "ScalingDecision", "StageSnapshot", "decide",
    "GatewayClient", "LatencyRecord", "LatencyStats",
    "bench_gateway", "bench_remote", "compare_sequential",
    "AutoscalerConfig", "GatewayConfig", "ServingConfig", "StageConfig",
    "load_serving_config", "serving_config_from_dict",
    "Gateway", "InferResult", "StageServer",
]
