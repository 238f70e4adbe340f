"""Discrete-event simulator of a single-device serving loop with runtime morphing.

One device timeline executes either a batched prefill or a continuous-batching
decode step at a time.  Layer swaps and KV resizes are future-dated events
that never consume device time.
"""
from __future__ import annotations

import enum
import heapq
import logging
from dataclasses import dataclass, field
from typing import Mapping

from .controller import (
    ATTACH,
    DETACH,
    NONE,
    RESTORE_NEXT,
    SWAP_NEXT,
    Command,
    Controller,
    ControllerConfig,
    MorphView,
    TelemetrySample,
)
from .kvpool import Deferred, KvBlockPool, KvConfig, kv_block_bytes
from .metrics import MetricsReport, TimelineRecord, build_report
from .profiler import SwapSequence
from .toymodel import Precision
from .workload import Trace

log = logging.getLogger(__name__)

__all__ = [
    "GiB",
    "MiB",
    "RequestState",
    "Request",
    "ModelSpec",
    "CostModel",
    "MemoryLedger",
    "MorphState",
    "Policy",
    "ServingSimulator",
    "SimulationResult",
    "UnserviceableRequestError",
    "ConfigError",
    "run",
]

GiB = 1024 ** 3
MiB = 1024 ** 2


class ConfigError(ValueError):
    pass


class UnserviceableRequestError(RuntimeError):
    pass


class RequestState(str, enum.Enum):
    QUEUED = "QUEUED"
    PREFILLING = "PREFILLING"
    DECODING = "DECODING"
    SWAPPED_OUT = "SWAPPED_OUT"
    DONE = "DONE"


@dataclass
class Request:
    id: int
    arrival_ms: float
    prompt_tokens: int
    output_tokens: int
    state: RequestState = RequestState.QUEUED
    admitted_ms: float | None = None
    first_token_ms: float | None = None
    done_ms: float | None = None
    tokens_generated: int = 0
    preemptions: int = 0
    exposed_tokens: int = 0
    exposure_layer_sum: int = 0

    @property
    def ttft_ms(self) -> float | None:
        return None if self.first_token_ms is None else self.first_token_ms - self.arrival_ms

    @property
    def tpot_ms(self) -> float | None:
        if self.done_ms is None or self.output_tokens < 2:
            return None
        return (self.done_ms - self.first_token_ms) / (self.output_tokens - 1)

    @property
    def e2e_ms(self) -> float | None:
        return None if self.done_ms is None else self.done_ms - self.arrival_ms

    @property
    def queueing_ms(self) -> float | None:
        return None if self.admitted_ms is None else self.admitted_ms - self.arrival_ms

    @property
    def context_tokens(self) -> int:
        return self.prompt_tokens + self.tokens_generated


def _default_layer_bytes() -> dict:
    return {
        Precision.FULL: int(0.4 * GiB),
        Precision.Q8: int(0.2 * GiB),
        Precision.Q4: int(0.1 * GiB),
        Precision.Q3: int(0.075 * GiB),
    }


@dataclass(frozen=True)
class ModelSpec:
    """Layer count, per-variant layer sizes and KV geometry (Llama-2-7B-like defaults)."""
    num_layers: int = 32
    layer_bytes: Mapping[Precision, int] = field(default_factory=_default_layer_bytes)
    kv_heads: int = 32
    head_dim: int = 128

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        sizes = {Precision(k): int(v) for k, v in self.layer_bytes.items()}
        if set(sizes) != set(Precision):
            raise ConfigError(f"layer_bytes needs a size for each of {[p.value for p in Precision]}")
        if any(v <= 0 for v in sizes.values()):
            raise ConfigError("layer sizes must be positive")
        object.__setattr__(self, "layer_bytes", sizes)

    def size(self, tag: Precision) -> int:
        return self.layer_bytes[tag]

    def kv_block_bytes(self, block_tokens: int) -> int:
        return kv_block_bytes(self.num_layers, self.kv_heads, self.head_dim, block_tokens)

    def blocks_freed_by(self, tag: Precision, block_bytes: int) -> int:
        return (self.size(Precision.FULL) - self.size(tag)) // block_bytes


def _default_decode_ms() -> dict:
    return {Precision.FULL: 1.0, Precision.Q8: 0.6, Precision.Q4: 0.4, Precision.Q3: 0.35}


@dataclass(frozen=True)
class CostModel:
    prefill_ms_per_token: float = 0.1
    decode_ms_per_layer: Mapping[Precision, float] = field(default_factory=_default_decode_ms)
    attn_ms_per_kv_block: float = 0.005
    pcie_gib_per_s: float = 26.0
    swap_fixed_overhead_ms: float = 2.0
    max_batch_tokens: int = 4096

    def __post_init__(self):
        costs = {Precision(k): float(v) for k, v in self.decode_ms_per_layer.items()}
        if set(costs) != set(Precision):
            raise ConfigError("decode_ms_per_layer needs a cost for every precision tag")
        object.__setattr__(self, "decode_ms_per_layer", costs)
        scalars = (self.prefill_ms_per_token, self.attn_ms_per_kv_block, self.pcie_gib_per_s,
                   self.swap_fixed_overhead_ms, self.max_batch_tokens)
        if any(v <= 0 for v in scalars) or any(v <= 0 for v in costs.values()):
            raise ConfigError("cost constants must be positive")
        chain = [costs[p] for p in (Precision.FULL, Precision.Q8, Precision.Q4, Precision.Q3)]
        if any(b > a for a, b in zip(chain, chain[1:])):
            raise ConfigError("decode cost per layer must not increase as precision decreases")

    def swap_ms(self, variant_bytes: int) -> float:
        """Fixed overhead plus PCIe transfer of the incoming variant."""
        return self.swap_fixed_overhead_ms + variant_bytes / (self.pcie_gib_per_s * GiB) * 1000.0

    def prefill_ms(self, tokens: int) -> float:
        return tokens * self.prefill_ms_per_token


class MemoryLedger:
    """``model + kv + reserve + free == budget`` with ``free >= 0``."""

    def __init__(self, device_budget_bytes: int, reserve_bytes: int, morph: "MorphState", pool: KvBlockPool):
        self.device_budget_bytes = device_budget_bytes
        self.reserve_bytes = reserve_bytes
        self._morph = morph
        self._pool = pool

    @property
    def model_bytes(self) -> int:
        return self._morph.model_bytes

    @property
    def kv_bytes(self) -> int:
        return self._pool.kv_bytes

    @property
    def free_bytes(self) -> int:
        return self.device_budget_bytes - self.model_bytes - self.kv_bytes - self.reserve_bytes

    def check(self) -> None:
        total = self.model_bytes + self.kv_bytes + self.reserve_bytes + self.free_bytes
        if total != self.device_budget_bytes or self.free_bytes < 0:
            raise AssertionError(
                f"memory ledger broken: model={self.model_bytes} kv={self.kv_bytes} "
                f"reserve={self.reserve_bytes} free={self.free_bytes} budget={self.device_budget_bytes}"
            )


@dataclass
class _Swap:
    layer: int
    src: Precision
    dst: Precision
    completes_at_ms: float


class MorphState:
    """Resident precision of each layer plus in-flight swaps."""

    def __init__(self, spec: ModelSpec, initial: Precision = Precision.FULL):
        self.spec = spec
        self.tags = [initial] * spec.num_layers
        self.in_flight: dict[int, _Swap] = {}
        self._bytes = spec.size(initial) * spec.num_layers

    @property
    def model_bytes(self) -> int:
        return self._bytes

    @property
    def quantized_layers(self) -> int:
        return sum(t is not Precision.FULL for t in self.tags)

    def begin(self, layer: int, dst: Precision, completes_at_ms: float) -> _Swap:
        if layer in self.in_flight:
            raise RuntimeError(f"layer {layer} already has a swap in flight")
        if self.tags[layer] is dst:
            raise ValueError(f"layer {layer} is already at {dst.value}")
        swap = _Swap(layer, self.tags[layer], dst, completes_at_ms)
        self.in_flight[layer] = swap
        return swap

    def complete(self, layer: int) -> _Swap:
        swap = self.in_flight.pop(layer)
        self.tags[layer] = swap.dst
        self._bytes += self.spec.size(swap.dst) - self.spec.size(swap.src)
        return swap

    def check(self) -> None:
        if self._bytes != sum(self.spec.size(t) for t in self.tags):
            raise AssertionError("model_bytes out of sync with resident layer sizes")


@dataclass(frozen=True)
class Policy:
    """Experimental arm: static full precision, static quantized, or runtime morphing."""
    kind: str = "static-full"
    bits: int = 4
    controller: ControllerConfig | None = None

    @classmethod
    def static_full(cls) -> "Policy":
        return cls("static-full")

    @classmethod
    def static_quant(cls, bits: int = 4) -> "Policy":
        return cls("static-quant", bits)

    @classmethod
    def morph(cls, controller: ControllerConfig) -> "Policy":
        return cls("morph", controller.target_bits, controller)

    def __post_init__(self):
        if self.kind not in ("static-full", "static-quant", "morph"):
            raise ConfigError(f"unknown policy kind {self.kind!r}")
        if self.kind == "morph" and self.controller is None:
            raise ConfigError("morph policy needs a controller config")
        Precision.from_bits(self.bits)


@dataclass
class SimulationResult:
    report: MetricsReport
    events: list[dict]
    requests: list[Request]
    timeline: list[TimelineRecord]


_ARRIVAL, _PREFILL_DONE, _DECODE_DONE, _SWAP_DONE, _TICK = range(5)


class ServingSimulator:
    """Deterministic event loop; one instance per run.

    Parameters
    ----------
    model, kv, cost : ModelSpec, KvConfig, CostModel
    policy : Policy
    device_budget_bytes, reserve_bytes : int
    sequence : SwapSequence, optional
        Required for the morph policy.
    slo_ms : float
    audit : bool
        Check memory and pool invariants at every event boundary.
    """

    def __init__(self, model: ModelSpec, kv: KvConfig, cost: CostModel, policy: Policy,
                 device_budget_bytes: int = 24 * GiB, reserve_bytes: int = 2 * GiB,
                 sequence: SwapSequence | None = None, slo_ms: float = 2000.0,
                 audit: bool = False, arm: str | None = None, fingerprint: str | None = None):
        self.model = model
        self.kv = kv
        self.cost = cost
        self.policy = policy
        self.slo_ms = slo_ms
        self.audit = audit
        self.arm = arm or policy.kind
        self.fingerprint = fingerprint

        initial = Precision.FULL if policy.kind != "static-quant" else Precision.from_bits(policy.bits)
        self.morph = MorphState(model, initial)
        self.pool = KvBlockPool(kv)
        self.ledger = MemoryLedger(device_budget_bytes, reserve_bytes, self.morph, self.pool)
        if self.ledger.free_bytes < 0:
            raise ConfigError(
                f"static KV capacity ({kv.static_capacity_blocks} blocks of {kv.block_bytes} B), "
                f"model ({self.morph.model_bytes} B) and reserve ({reserve_bytes} B) exceed the "
                f"device budget ({device_budget_bytes} B)"
            )
        self.controller = None
        if policy.kind == "morph":
            if sequence is None:
                raise ConfigError("morph policy needs a swap sequence")
            self.controller = Controller(policy.controller, sequence, model.num_layers)
            self._target = Precision.from_bits(policy.controller.target_bits)

        self._heap: list = []
        self._seq = 0
        self.now = 0.0
        self.requests: list[Request] = []
        self.queue: list[Request] = []
        self.running: list[Request] = []   # admission order
        self.device_busy = False
        self.events: list[dict] = []
        self.timeline: list[TimelineRecord] = []
        self.preemptions = 0
        self._hol_id: int | None = None
        self._hol_since: float | None = None
        self._completions: list = []
        self._tick_pending = False
        # morph bookkeeping
        self.depth = 0
        self._attached: dict[int, int] = {}
        self._pending_restore: int | None = None
        self._pcie_free_at = 0.0
        self.morph_counts = {"swaps": 0, "restores": 0, "attached_blocks": 0,
                             "detached_blocks": 0, "faults": 0}

    # -- event plumbing ----------------------------------------------------
    def _push(self, t: float, kind: int, payload=None) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, payload))
        self._seq += 1

    def _log(self, event: str, **fields) -> None:
        rec = {"t_ms": round(self.now, 6), "event": event}
        rec.update(fields)
        self.events.append(rec)

    # -- main loop ---------------------------------------------------------
    def run(self, trace: Trace) -> SimulationResult:
        for i, ev in enumerate(trace.events):
            req = Request(i, float(ev.arrival_ms), ev.prompt_tokens, ev.output_tokens)
            self.requests.append(req)
            self._push(req.arrival_ms, _ARRIVAL, req)

        self._record()
        while self._heap:
            t = self._heap[0][0]
            if t < self.now:
                raise RuntimeError(f"event at {t} ms precedes current time {self.now} ms")
            self.now = t
            while self._heap and self._heap[0][0] == t:
                _, _, kind, payload = heapq.heappop(self._heap)
                self._dispatch(kind, payload)
            self._boundary()

        unfinished = [r.id for r in self.requests if r.state is not RequestState.DONE]
        if unfinished:
            raise RuntimeError(f"simulation ended with unfinished requests {unfinished[:5]}")
        report = build_report(
            arm=self.arm, fingerprint=self.fingerprint, slo_ms=self.slo_ms,
            requests=self.requests, timeline=self.timeline, preemptions=self.preemptions,
            static_capacity_blocks=self.kv.static_capacity_blocks,
            block_bytes=self.kv.block_bytes, num_layers=self.model.num_layers,
            precision_changes=[e for e in self.events if e["event"] == "swap_done"],
            morph_counts=self.morph_counts,
        )
        return SimulationResult(report, self.events, self.requests, self.timeline)

    def _dispatch(self, kind: int, payload) -> None:
        if kind == _ARRIVAL:
            payload.state = RequestState.QUEUED
            self.queue.append(payload)
            self._log("arrival", req=payload.id, prompt=payload.prompt_tokens, output=payload.output_tokens)
        elif kind == _PREFILL_DONE:
            self._prefill_done(*payload)
        elif kind == _DECODE_DONE:
            self._decode_done(*payload)
        elif kind == _SWAP_DONE:
            self._swap_done(payload)
        elif kind == _TICK:
            self._tick_pending = False

    def _boundary(self) -> None:
        if self.controller is not None:
            self._observe()
            self._apply(self.controller.decide(self.now, self._view()))
            self._try_start_restore()
        if not self.device_busy:
            self._schedule_device()
        self._record()
        if self.audit:
            self.check_invariants()

    # -- telemetry / timeline ------------------------------------------------
    def _hol_wait(self) -> float:
        if self.queue and self._hol_id == self.queue[0].id and self._hol_since is not None:
            return self.now - self._hol_since
        return 0.0

    def _observe(self) -> None:
        sample = TelemetrySample(
            self.now, self.pool.used_blocks, self.pool.capacity_blocks, len(self.queue),
            self._hol_wait(), tuple(self._completions),
        )
        self._completions = []
        self.controller.observe(sample)

    def _record(self) -> None:
        rec = TimelineRecord(self.now, self.pool.capacity_blocks, self.pool.used_blocks,
                             self.morph.quantized_layers, len(self.queue))
        if self.timeline and self.timeline[-1].t_ms == rec.t_ms:
            self.timeline[-1] = rec
        elif not self.timeline or self.timeline[-1][1:] != rec[1:]:
            self.timeline.append(rec)

    # -- scheduling ----------------------------------------------------------
    def _schedule_device(self) -> None:
        # a decode step may preempt its whole batch; then retry admission
        while not self.device_busy:
            admitted = self.admit_step(self.now)
            if admitted:
                self._start_prefill(admitted)
            elif self.running:
                self.decode_step(self.now)
                continue
            elif self.queue:
                self._idle_with_blocked_head()
            elif self.controller is not None and (self.depth or self.pool.attached_extra_blocks):
                self._schedule_tick()
            return

    def _schedule_tick(self) -> None:
        if not self._tick_pending:
            self._tick_pending = True
            self._push(self.now + self.policy.controller.telemetry_window_ms, _TICK)

    def _blocks_to_admit(self, req: Request) -> int:
        return self.kv.blocks_for(req.context_tokens)

    def _max_capacity(self) -> int:
        cap = self.kv.static_capacity_blocks
        if self.controller is not None:
            per_layer = self.model.blocks_freed_by(self._target, self.kv.block_bytes)
            cap += per_layer * self.policy.controller.max_swapped_layers
        return cap

    def _idle_with_blocked_head(self) -> None:
        head = self.queue[0]
        need = self._blocks_to_admit(head)
        if need > self._max_capacity():
            raise UnserviceableRequestError(
                f"request {head.id} needs {need} KV blocks but the pool can never exceed "
                f"{self._max_capacity()} blocks"
            )
        if self.controller is None:
            if self.pool.used_blocks == 0 and self.pool.pending_detach == 0:
                raise UnserviceableRequestError(
                    f"request {head.id} needs {need} KV blocks; only {self.pool.capacity_blocks} exist"
                )
            return
        self._schedule_tick()

    def admit_step(self, now_ms: float) -> list[Request]:
        """Strict FIFO admission of whole prompts (all-or-nothing per request)."""
        admitted: list[Request] = []
        budget = self.cost.max_batch_tokens
        while self.queue:
            head = self.queue[0]
            tokens = head.context_tokens
            if admitted and tokens > budget:
                break
            self.pool.admit(head.id)
            if self.pool.alloc_for_tokens(head.id, tokens) is None:
                self.pool.release(head.id)
                if self._hol_id != head.id:
                    self._hol_id, self._hol_since = head.id, now_ms
                break
            self.queue.pop(0)
            budget -= tokens
            if head.admitted_ms is None:
                head.admitted_ms = now_ms
            head.state = RequestState.PREFILLING
            admitted.append(head)
            if self._hol_id == head.id:
                self._hol_id = self._hol_since = None
        return admitted

    def _start_prefill(self, batch: list[Request]) -> None:
        tokens = sum(r.context_tokens for r in batch)
        duration = self.cost.prefill_ms(tokens)
        qlayers = self.morph.quantized_layers
        self.device_busy = True
        self._push(self.now + duration, _PREFILL_DONE, (batch, qlayers))
        self._log("prefill", reqs=[r.id for r in batch], tokens=tokens, duration_ms=duration)

    def _prefill_done(self, batch: list[Request], qlayers: int) -> None:
        self.device_busy = False
        for r in batch:
            if r.first_token_ms is None:
                r.first_token_ms = self.now
                self._emit(r, qlayers)
                self._completions.append((r.ttft_ms, None))
            if r.tokens_generated >= r.output_tokens:
                self._finish(r)
            else:
                r.state = RequestState.DECODING
                self.running.append(r)

    def _emit(self, r: Request, qlayers: int) -> None:
        r.tokens_generated += 1
        if qlayers:
            r.exposed_tokens += 1
            r.exposure_layer_sum += qlayers

    def _finish(self, r: Request) -> None:
        r.done_ms = self.now
        r.state = RequestState.DONE
        self.pool.release(r.id)
        if r.tpot_ms is not None:
            self._completions.append((r.ttft_ms, r.tpot_ms))
        self._log("done", req=r.id)

    def decode_step(self, now_ms: float) -> tuple[float, int]:
        """Grow every running request by one token and price the step.

        Returns ``(duration_ms, tokens)``.  Requests that cannot get a block
        trigger a controller consultation and then LIFO preemption.
        """
        for r in list(self.running):
            if r.state is not RequestState.DECODING:
                continue
            while self.pool.alloc_for_tokens(r.id, 1) is None:
                if self.controller is not None:
                    self._observe()
                    self._apply(self.controller.decide(now_ms, self._view(), shortage=True))
                victim = self._preempt()
                if victim is None or victim is r:
                    break
        batch = [r for r in self.running if r.state is RequestState.DECODING]
        if not batch:
            return 0.0, 0
        blocks = sum(len(self.pool.blocks_of(r.id)) for r in batch)
        layer_ms = sum(self.cost.decode_ms_per_layer[t] for t in self.morph.tags)
        duration = layer_ms + self.cost.attn_ms_per_kv_block * blocks
        qlayers = self.morph.quantized_layers
        self.device_busy = True
        self._push(now_ms + duration, _DECODE_DONE, (batch, qlayers))
        self._log("decode", batch=len(batch), blocks=blocks, duration_ms=round(duration, 6),
                  quantized=qlayers)
        return duration, len(batch)

    def _preempt(self) -> Request | None:
        victim_id = self.pool.preempt_victim(
            "LIFO", eligible=lambda rid: self.requests[rid].state is RequestState.DECODING
        )
        if victim_id is None:
            return None
        victim = self.requests[victim_id]
        victim.state = RequestState.SWAPPED_OUT
        victim.preemptions += 1
        self.running.remove(victim)
        self.queue.insert(0, victim)
        self.preemptions += 1
        self._log("preempt", req=victim.id, generated=victim.tokens_generated)
        return victim

    def _decode_done(self, batch: list[Request], qlayers: int) -> None:
        self.device_busy = False
        for r in batch:
            self._emit(r, qlayers)
            if r.tokens_generated >= r.output_tokens:
                self.running.remove(r)
                self._finish(r)

    # -- morphing actuator ---------------------------------------------------
    def _view(self) -> MorphView:
        last = self.controller.sequence.order[self.depth - 1] if self.depth else None
        return MorphView(
            depth=self.depth,
            busy=bool(self.morph.in_flight) or self._pending_restore is not None,
            attached_blocks=self.pool.attached_extra_blocks - self.pool.pending_detach,
            last_layer_attached=self._attached.get(last, 0) if last is not None else 0,
        )

    def _apply(self, commands: list[Command]) -> None:
        for cmd in commands:
            if cmd.kind == SWAP_NEXT:
                for layer in self.controller.layers_for(self.depth, cmd.count):
                    self.begin_swap(layer, self._target, self.now)
                    self.depth += 1
                self._log("command", kind=cmd.kind, count=cmd.count, reason=cmd.reason)
            elif cmd.kind == RESTORE_NEXT:
                self.depth -= 1
                self._pending_restore = self.controller.sequence.order[self.depth]
                self._log("command", kind=cmd.kind, count=cmd.count, reason=cmd.reason,
                          layer=self._pending_restore)
                self._try_start_restore()
            elif cmd.kind == DETACH:
                last = self.controller.sequence.order[self.depth - 1]
                result = self.pool.detach_blocks(cmd.count)
                self._attached[last] = self._attached.get(last, 0) - cmd.count
                self.morph_counts["detached_blocks"] += cmd.count
                pending = result.pending if isinstance(result, Deferred) else 0
                self._log("command", kind=cmd.kind, count=cmd.count, reason=cmd.reason,
                          layer=last, deferred=pending)
            elif cmd.kind == NONE:
                self._log("command", kind=cmd.kind, reason=cmd.reason)

    def begin_swap(self, layer: int, to: Precision, now_ms: float) -> float:
        """Schedule an asynchronous swap; returns its completion time."""
        if layer in self.morph.in_flight:
            raise RuntimeError(f"layer {layer} already has a swap in flight")
        if self.morph.tags[layer] is to:
            raise ValueError(f"layer {layer} is already at {to.value}")
        start = max(now_ms, self._pcie_free_at)
        done = start + self.cost.swap_ms(self.model.size(to))
        self._pcie_free_at = done
        self.morph.begin(layer, to, done)
        self._push(done, _SWAP_DONE, layer)
        self._log("swap_begin", layer=layer, src=self.morph.tags[layer].value, dst=to.value,
                  completes_ms=round(done, 6))
        return done

    def _try_start_restore(self) -> None:
        layer = self._pending_restore
        if layer is None or layer in self.morph.in_flight:
            return
        grow = self.model.size(Precision.FULL) - self.model.size(self.morph.tags[layer])
        if self.ledger.free_bytes >= grow:
            self.begin_swap(layer, Precision.FULL, self.now)

    def _swap_done(self, layer: int) -> None:
        swap = self.morph.complete(layer)
        self._log("swap_done", layer=layer, src=swap.src.value, dst=swap.dst.value)
        if swap.dst is Precision.FULL:
            self._pending_restore = None
            self._attached.pop(layer, None)
            self.morph_counts["restores"] += 1
            return
        self.morph_counts["swaps"] += 1
        freed = self.model.size(swap.src) - self.model.size(swap.dst)
        for cmd in self.controller.on_swap_complete(freed, self.kv.block_bytes):
            need = cmd.count * self.kv.block_bytes
            if need > self.ledger.free_bytes:
                self.morph_counts["faults"] += 1
                self._log("fault", kind=cmd.kind, count=cmd.count, free_bytes=self.ledger.free_bytes)
                continue
            self.pool.attach_blocks(cmd.count)
            self._attached[layer] = self._attached.get(layer, 0) + cmd.count
            self.morph_counts["attached_blocks"] += cmd.count
            self._log("command", kind=ATTACH, count=cmd.count, reason=cmd.reason, layer=layer,
                      capacity=self.pool.capacity_blocks)

    # -- auditing ------------------------------------------------------------
    def check_invariants(self) -> None:
        self.ledger.check()
        self.pool.check_invariants()
        self.morph.check()
        for r in self.requests:
            if r.first_token_ms is not None and r.first_token_ms < r.arrival_ms:
                raise AssertionError(f"request {r.id} first token before arrival")
            if r.tokens_generated > r.output_tokens:
                raise AssertionError(f"request {r.id} overgenerated")


def run(trace: Trace, model: ModelSpec, kv: KvConfig, cost: CostModel, policy: Policy,
        seed: int = 0, **kwargs) -> SimulationResult:
    """Run one simulation.  ``seed`` is accepted for interface symmetry; the loop is deterministic."""
    return ServingSimulator(model, kv, cost, policy, **kwargs).run(trace)
