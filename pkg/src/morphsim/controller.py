"""Pressure-driven morphing policy.

The controller watches windowed serving telemetry and decides when to
quantize the next layers of the profiled swap order (and attach the freed
memory to the KV pool), and when to give that memory back and restore
layers to full precision.  It runs inline in the simulator's event loop.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, replace

from .profiler import SwapSequence

__all__ = [
    "Mode",
    "ControllerConfig",
    "TelemetrySample",
    "Telemetry",
    "Command",
    "MorphView",
    "Controller",
    "SWAP_NEXT",
    "RESTORE_NEXT",
    "ATTACH",
    "DETACH",
    "NONE",
]

SWAP_NEXT = "SWAP_NEXT"
RESTORE_NEXT = "RESTORE_NEXT"
ATTACH = "ATTACH"
DETACH = "DETACH"
NONE = "NONE"


class Mode(str, enum.Enum):
    ACCURACY = "ACCURACY"
    PERFORMANCE = "PERFORMANCE"


@dataclass(frozen=True)
class ControllerConfig:
    mode: Mode = Mode.PERFORMANCE
    theta_kv: float = 0.85
    theta_queue_ms: float = 100.0
    theta_kv_low: float = 0.70
    hold_ms: float = 500.0
    max_swapped_layers: int = 16
    swap_step: int = 2
    telemetry_window_ms: float = 100.0
    target_bits: int = 4

    @classmethod
    def accuracy(cls, num_layers: int, **overrides) -> "ControllerConfig":
        base = cls(mode=Mode.ACCURACY, theta_kv=0.92, max_swapped_layers=max(1, num_layers // 4),
                   swap_step=1)
        return replace(base, **overrides)

    @classmethod
    def performance(cls, num_layers: int, **overrides) -> "ControllerConfig":
        base = cls(mode=Mode.PERFORMANCE, theta_kv=0.80, max_swapped_layers=max(1, num_layers // 2),
                   swap_step=min(2, max(1, num_layers // 2)))
        return replace(base, **overrides)

    def validate(self, num_layers: int) -> None:
        if not 0 < self.theta_kv_low < self.theta_kv <= 1:
            raise ValueError(
                f"need 0 < theta_kv_low < theta_kv <= 1, got {self.theta_kv_low}, {self.theta_kv}"
            )
        if not 1 <= self.swap_step <= self.max_swapped_layers <= num_layers:
            raise ValueError(
                f"need 1 <= swap_step <= max_swapped_layers <= {num_layers}, "
                f"got {self.swap_step}, {self.max_swapped_layers}"
            )
        if self.theta_queue_ms <= 0 or self.hold_ms < 0 or self.telemetry_window_ms <= 0:
            raise ValueError("theta_queue_ms and telemetry_window_ms must be positive, hold_ms >= 0")
        if self.target_bits not in (8, 4, 3):
            raise ValueError(f"target_bits must be 8, 4 or 3, got {self.target_bits}")


@dataclass(frozen=True)
class TelemetrySample:
    t_ms: float
    kv_used_blocks: int
    kv_capacity_blocks: int
    queue_depth: int
    hol_wait_ms: float
    # (ttft_ms, tpot_ms or None) of requests finished since the previous sample
    completions: tuple = ()


@dataclass(frozen=True)
class Telemetry:
    kv_usage: float
    queue_depth: float
    hol_wait_ms: float
    throughput_rps: float
    ttft_ms: float | None
    tpot_ms: float | None


@dataclass(frozen=True)
class Command:
    kind: str
    count: int = 0
    reason: str = ""


@dataclass(frozen=True)
class MorphView:
    """What the controller needs to know about the engine's morph state."""
    depth: int                     # layers of the sequence prefix swapped or swapping
    busy: bool                     # a swap is in flight or a restore awaits memory
    attached_blocks: int           # extra KV blocks currently attached
    last_layer_attached: int = 0   # blocks attached on behalf of the deepest swapped layer


class Controller:
    def __init__(self, config: ControllerConfig, sequence: SwapSequence, num_layers: int):
        sequence.check_layers(num_layers)
        config.validate(num_layers)
        self.config = config
        self.sequence = sequence
        self.num_layers = num_layers
        self._samples: deque[TelemetrySample] = deque()
        self._last: TelemetrySample | None = None
        self._low_since: float | None = None
        self._last_swap_ms: float | None = None
        self._last_restore_ms: float | None = None
        self._last_reason: str | None = None

    # -- monitor -----------------------------------------------------------
    def observe(self, sample: TelemetrySample) -> Telemetry:
        if self._last is not None and sample.t_ms < self._last.t_ms:
            raise RuntimeError(
                f"telemetry sample at {sample.t_ms} ms arrived after {self._last.t_ms} ms"
            )
        self._samples.append(sample)
        self._last = sample
        horizon = sample.t_ms - self.config.telemetry_window_ms
        while self._samples and self._samples[0].t_ms < horizon:
            self._samples.popleft()
        return self.telemetry()

    def telemetry(self) -> Telemetry:
        window = list(self._samples) or ([self._last] if self._last else [])
        if not window:
            return Telemetry(0.0, 0.0, 0.0, 0.0, None, None)
        n = len(window)
        usage = sum(s.kv_used_blocks / s.kv_capacity_blocks for s in window) / n
        depth = sum(s.queue_depth for s in window) / n
        hol = sum(s.hol_wait_ms for s in window) / n
        done = [c for s in window for c in s.completions]
        throughput = len(done) / (self.config.telemetry_window_ms / 1000.0)
        ttfts = [c[0] for c in done]
        tpots = [c[1] for c in done if c[1] is not None]
        return Telemetry(
            usage, depth, hol, throughput,
            sum(ttfts) / len(ttfts) if ttfts else None,
            sum(tpots) / len(tpots) if tpots else None,
        )

    # -- policy ------------------------------------------------------------
    def _note(self, reason: str) -> list[Command]:
        # reason-coded NONE commands are reported once per change of reason
        if reason == self._last_reason:
            return []
        self._last_reason = reason
        return [Command(NONE, 0, reason)]

    def decide(self, now_ms: float, view: MorphView, shortage: bool = False) -> list[Command]:
        """Turn current telemetry into morph commands.

        ``shortage`` marks a decode step that could not get a KV block; it
        counts as a trigger regardless of the smoothed telemetry.
        """
        cfg = self.config
        tel = self.telemetry()
        if view.busy:
            return []
        usage_hit = tel.kv_usage > cfg.theta_kv
        queue_hit = tel.hol_wait_ms > cfg.theta_queue_ms
        if shortage or usage_hit or queue_hit:
            self._low_since = None
            if view.depth >= cfg.max_swapped_layers:
                return self._note("cap_hit")
            if self._last_restore_ms is not None and now_ms - self._last_restore_ms < cfg.hold_ms:
                return self._note("hysteresis_hold")
            k = min(cfg.swap_step, cfg.max_swapped_layers - view.depth)
            self._last_swap_ms = now_ms
            self._last_reason = None
            reason = "decode_shortage" if shortage else ("kv_usage" if usage_hit else "queue_delay")
            return [Command(SWAP_NEXT, k, reason)]

        self._last_reason = None
        if tel.kv_usage < cfg.theta_kv_low and (view.depth > 0 or view.attached_blocks > 0):
            if self._low_since is None:
                self._low_since = now_ms
            held = now_ms - self._low_since >= cfg.hold_ms
            cooled = self._last_swap_ms is None or now_ms - self._last_swap_ms >= cfg.hold_ms
            if held and cooled:
                self._low_since = now_ms
                self._last_restore_ms = now_ms
                cmds = []
                if view.last_layer_attached:
                    cmds.append(Command(DETACH, view.last_layer_attached, "low_usage"))
                if view.depth > 0:
                    cmds.append(Command(RESTORE_NEXT, 1, "low_usage"))
                return cmds
        else:
            self._low_since = None
        return []

    def on_swap_complete(self, freed_bytes: int, block_bytes: int) -> list[Command]:
        """ATTACH the whole blocks freed by a completed downgrade."""
        n = freed_bytes // block_bytes if freed_bytes > 0 else 0
        return [Command(ATTACH, n, "swap_complete")] if n > 0 else []

    def layers_for(self, depth: int, k: int) -> tuple[int, ...]:
        return self.sequence.order[depth:depth + k]
