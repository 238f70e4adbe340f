"""Experiment configuration: INI file in, validated objects and a fingerprint out."""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .controller import ControllerConfig
from .engine import GiB, ConfigError, CostModel, ModelSpec, Policy
from .kvpool import KvConfig
from .toymodel import Precision
from .workload import Trace, downscale, parse_trace, synth_burst

__all__ = [
    "ARMS",
    "ExperimentConfig",
    "ProfilerSettings",
    "WorkloadSettings",
    "load_config",
    "parse_config",
]

ARMS = ("static-full", "static-quant", "morph-accuracy", "morph-performance")


@dataclass(frozen=True)
class WorkloadSettings:
    source: str = "synth"          # "synth" or "file"
    path: str = ""
    base_rps: float = 1.5
    burst_rps: float = 4.0
    burst_start_ms: int = 10_000
    burst_len_ms: int = 12_000
    total_ms: int = 42_000
    prompt_tokens: int = 512
    output_tokens: int = 256

    def validate(self) -> None:
        if self.source not in ("synth", "file"):
            raise ConfigError(f"workload.source must be 'synth' or 'file', got {self.source!r}")
        if self.source == "file" and not self.path:
            raise ConfigError("workload.path is required when workload.source = file")
        if self.base_rps <= 0 or self.burst_rps <= 0:
            raise ConfigError("workload rates must be positive")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ConfigError("workload token counts must be >= 1")
        if not 0 <= self.burst_start_ms <= self.burst_start_ms + self.burst_len_ms <= self.total_ms:
            raise ConfigError("workload burst window must lie inside [0, total_ms]")


@dataclass(frozen=True)
class ProfilerSettings:
    num_layers: int | None = None   # defaults to the served model's layer count
    hidden_dim: int = 16
    seed: int = 7
    bits: int = 4
    alpha1: float = 0.25
    alpha2: float = 0.25
    beta: float = 0.5
    calibration_samples: int = 32
    random_baselines: int = 20

    def validate(self) -> None:
        if self.num_layers is None or self.num_layers < 1 or self.hidden_dim < 2:
            raise ConfigError("profiler needs num_layers >= 1 and hidden_dim >= 2")
        if min(self.alpha1, self.alpha2, self.beta) < 0 or self.alpha1 + self.alpha2 + self.beta == 0:
            raise ConfigError("profiler weights must be non-negative and not all zero")
        if self.bits not in (8, 4, 3):
            raise ConfigError(f"profiler.bits must be 8, 4 or 3, got {self.bits}")
        if self.calibration_samples < 1 or self.random_baselines < 1:
            raise ConfigError("calibration_samples and random_baselines must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    kv: KvConfig = None
    cost: CostModel = field(default_factory=CostModel)
    device_budget_bytes: int = 24 * GiB
    reserve_bytes: int = 2 * GiB
    accuracy: ControllerConfig = None
    performance: ControllerConfig = None
    workload: WorkloadSettings = field(default_factory=WorkloadSettings)
    profiler: ProfilerSettings = field(default_factory=ProfilerSettings)
    seed: int = 0
    slo_ms: float = 2000.0
    downscale: float = 1.0
    sequence_file: str = "profile/lis_greedy.json"

    def __post_init__(self):
        L = self.model.num_layers
        if self.kv is None:
            object.__setattr__(self, "kv", default_kv(self.model, self.device_budget_bytes, self.reserve_bytes))
        if self.accuracy is None:
            object.__setattr__(self, "accuracy", ControllerConfig.accuracy(L))
        if self.performance is None:
            object.__setattr__(self, "performance", ControllerConfig.performance(L))
        if self.profiler.num_layers is None:
            object.__setattr__(self, "profiler", replace(self.profiler, num_layers=L))
        self.validate()

    def validate(self) -> None:
        L = self.model.num_layers
        for cc in (self.accuracy, self.performance):
            try:
                cc.validate(L)
            except ValueError as exc:
                raise ConfigError(f"controller.{cc.mode.value.lower()}: {exc}") from None
        if self.accuracy.max_swapped_layers > self.performance.max_swapped_layers:
            raise ConfigError("accuracy mode may not swap more layers than performance mode")
        if self.accuracy.theta_kv < self.performance.theta_kv:
            raise ConfigError("accuracy mode theta_kv must be >= performance mode theta_kv")
        if self.slo_ms <= 0 or self.downscale <= 0:
            raise ConfigError("slo_ms and downscale must be positive")
        if self.reserve_bytes < 0:
            raise ConfigError("reserve must be non-negative")
        used = (L * self.model.size(Precision.FULL) + self.reserve_bytes
                + self.kv.static_capacity_blocks * self.kv.block_bytes)
        if used > self.device_budget_bytes:
            raise ConfigError(
                f"full-precision model, reserve and static KV capacity need {used} bytes, "
                f"device budget is {self.device_budget_bytes}"
            )
        self.workload.validate()
        self.profiler.validate()

    def policy(self, arm: str) -> Policy:
        if arm == "static-full":
            return Policy.static_full()
        if arm == "static-quant":
            return Policy.static_quant(self.performance.target_bits)
        if arm == "morph-accuracy":
            return Policy.morph(self.accuracy)
        if arm == "morph-performance":
            return Policy.morph(self.performance)
        raise ConfigError(f"unknown arm {arm!r}; choose from {', '.join(ARMS)}")

    def trace(self) -> Trace:
        w = self.workload
        if w.source == "file":
            trace = parse_trace(w.path)
        else:
            trace = synth_burst(self.seed, w.base_rps, w.burst_rps, w.burst_start_ms,
                                w.burst_len_ms, w.total_ms, w.prompt_tokens, w.output_tokens)
        return downscale(trace, self.downscale) if self.downscale != 1.0 else trace

    def canonical(self) -> dict:
        """Plain sorted-key structure of every resolved setting."""
        def enc(obj):
            if isinstance(obj, dict):
                return {str(getattr(k, "value", k)): enc(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
            if isinstance(obj, (list, tuple)):
                return [enc(v) for v in obj]
            return getattr(obj, "value", obj)
        return enc({
            "model": asdict(self.model), "kv": asdict(self.kv), "cost": asdict(self.cost),
            "device": {"budget_bytes": self.device_budget_bytes, "reserve_bytes": self.reserve_bytes},
            "controller.accuracy": asdict(self.accuracy),
            "controller.performance": asdict(self.performance),
            "workload": asdict(self.workload), "profiler": asdict(self.profiler),
            "run": {"seed": self.seed, "slo_ms": self.slo_ms, "downscale": self.downscale,
                    "sequence_file": self.sequence_file},
        })

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_ini(self) -> str:
        """Serialize every resolved setting; ``parse_config(cfg.to_ini())`` reproduces ``cfg``."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["model"] = {"num_layers": self.model.num_layers, "kv_heads": self.model.kv_heads,
                       "head_dim": self.model.head_dim,
                       **{f"{k}_gib": repr(self.model.size(tag) / GiB) for k, tag in _PRECISION_KEYS.items()}}
        cp["device"] = {"budget_gib": repr(self.device_budget_bytes / GiB),
                        "reserve_gib": repr(self.reserve_bytes / GiB)}
        cp["kv"] = {"block_tokens": self.kv.block_tokens,
                    "static_capacity_blocks": self.kv.static_capacity_blocks}
        cost = {k: repr(v) for k, v in asdict(self.cost).items() if k != "decode_ms_per_layer"}
        cost.update({f"decode_ms_{k}": repr(self.cost.decode_ms_per_layer[tag])
                     for k, tag in _PRECISION_KEYS.items()})
        cp["cost"] = cost
        for name, cc in (("controller.accuracy", self.accuracy), ("controller.performance", self.performance)):
            cp[name] = {k: repr(v) for k, v in asdict(cc).items() if k != "mode"}
        cp["workload"] = {k: str(v) for k, v in asdict(self.workload).items()}
        cp["profiler"] = {k: repr(v) for k, v in asdict(self.profiler).items()}
        cp["run"] = {"seed": self.seed, "slo_ms": repr(self.slo_ms), "downscale": repr(self.downscale),
                     "sequence_file": self.sequence_file}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def default_kv(model: ModelSpec, budget: int, reserve: int, block_tokens: int = 16) -> KvConfig:
    """Static KV capacity = whatever the full-precision model and reserve leave over."""
    block_bytes = model.kv_block_bytes(block_tokens)
    spare = budget - model.num_layers * model.size(Precision.FULL) - reserve
    if spare < block_bytes:
        raise ConfigError("device budget leaves no room for a single KV block")
    return KvConfig(block_tokens, block_bytes, spare // block_bytes)


_PRECISION_KEYS = {"full": Precision.FULL, "q8": Precision.Q8, "q4": Precision.Q4, "q3": Precision.Q3}


def _section(cp, name, known):
    if not cp.has_section(name):
        return {}
    items = dict(cp.items(name))
    unknown = set(items) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    out = {}
    for key, value in items.items():
        kind = known[key]
        try:
            out[key] = kind(value)
        except ValueError:
            raise ConfigError(f"[{name}] {key} = {value!r} is not a valid {kind.__name__}") from None
    return out


def parse_config(text: str, **overrides) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    known_sections = {"model", "kv", "cost", "device", "controller", "controller.accuracy",
                      "controller.performance", "workload", "profiler", "run"}
    extra = set(cp.sections()) - known_sections
    if extra:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(extra))}")

    m = _section(cp, "model", {"num_layers": int, "kv_heads": int, "head_dim": int,
                               **{f"{k}_gib": float for k in _PRECISION_KEYS}})
    sizes = ModelSpec().layer_bytes
    sizes = {tag: int(m.pop(f"{k}_gib") * GiB) if f"{k}_gib" in m else sizes[tag]
             for k, tag in _PRECISION_KEYS.items()}
    model = ModelSpec(layer_bytes=sizes, **m)

    d = _section(cp, "device", {"budget_gib": float, "reserve_gib": float})
    budget = int(d.get("budget_gib", 24) * GiB)
    reserve = int(d.get("reserve_gib", 2) * GiB)

    k = _section(cp, "kv", {"block_tokens": int, "static_capacity_blocks": int})
    kv = default_kv(model, budget, reserve, k.get("block_tokens", 16))
    if "static_capacity_blocks" in k:
        kv = replace(kv, static_capacity_blocks=k["static_capacity_blocks"])

    c = _section(cp, "cost", {"prefill_ms_per_token": float, "attn_ms_per_kv_block": float,
                              "pcie_gib_per_s": float, "swap_fixed_overhead_ms": float,
                              "max_batch_tokens": int,
                              **{f"decode_ms_{k}": float for k in _PRECISION_KEYS}})
    decode = dict(CostModel().decode_ms_per_layer)
    for key, tag in _PRECISION_KEYS.items():
        if f"decode_ms_{key}" in c:
            decode[tag] = c.pop(f"decode_ms_{key}")
    cost = CostModel(decode_ms_per_layer=decode, **c)

    shared_keys = {"theta_queue_ms": float, "theta_kv_low": float, "hold_ms": float,
                   "telemetry_window_ms": float, "target_bits": int}
    mode_keys = {"theta_kv": float, "max_swapped_layers": int, "swap_step": int, **shared_keys}
    shared = _section(cp, "controller", shared_keys)
    acc = ControllerConfig.accuracy(model.num_layers, **{**shared, **_section(cp, "controller.accuracy", mode_keys)})
    perf = ControllerConfig.performance(model.num_layers, **{**shared, **_section(cp, "controller.performance", mode_keys)})

    w = WorkloadSettings(**_section(cp, "workload", {
        "source": str, "path": str, "base_rps": float, "burst_rps": float, "burst_start_ms": int,
        "burst_len_ms": int, "total_ms": int, "prompt_tokens": int, "output_tokens": int}))
    p = ProfilerSettings(**_section(cp, "profiler", {
        "num_layers": int, "hidden_dim": int, "seed": int, "bits": int, "alpha1": float,
        "alpha2": float, "beta": float, "calibration_samples": int, "random_baselines": int}))
    r = _section(cp, "run", {"seed": int, "slo_ms": float, "downscale": float, "sequence_file": str})
    r.update({key: v for key, v in overrides.items() if v is not None})
    return ExperimentConfig(model=model, kv=kv, cost=cost, device_budget_bytes=budget,
                            reserve_bytes=reserve, accuracy=acc, performance=perf,
                            workload=w, profiler=p, **r)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read an INI config (or use defaults when ``path`` is None) and validate it."""
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, **overrides)
