"""Serving simulator with runtime layer-precision morphing."""
from .toymodel import Precision, build_model, forward, PrecisionConfig
from .profiler import LayerSwapProfiler, SwapSequence, greedy_sequence, baseline_sequence
from .kvpool import KvBlockPool, KvConfig
from .controller import Controller, ControllerConfig, Mode
from .engine import CostModel, ModelSpec, Policy, ServingSimulator, run
from .workload import Trace, TraceEvent, parse_trace, synth_burst, synth_poisson

__version__ = "0.1.0"

__all__ = [
    "Precision", "PrecisionConfig", "build_model", "forward",
    "LayerSwapProfiler", "SwapSequence", "greedy_sequence", "baseline_sequence",
    "KvBlockPool", "KvConfig",
    "Controller", "ControllerConfig", "Mode",
    "CostModel", "ModelSpec", "Policy", "ServingSimulator", "run",
    "Trace", "TraceEvent", "parse_trace", "synth_burst", "synth_poisson",
]
