"""Latency/SLO metrics and run output writers."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import NamedTuple

__all__ = [
    "percentile",
    "summarize",
    "TimelineRecord",
    "MetricsReport",
    "build_report",
    "timeline_per_second",
    "write_outputs",
    "REPORT_FIELDS",
]

REPORT_FIELDS = (
    "arm", "config_fingerprint", "slo_ms", "requests_total", "requests_completed",
    "ttft_ms", "tpot_ms", "e2e_ms", "queueing_ms", "slo_violations", "slo_violation_rate",
    "preemptions", "throughput_rps", "kv", "exposure", "morph", "precision_timeline",
)


def percentile(values, p: float) -> float | None:
    """Nearest-rank percentile; ``None`` for an empty sample."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    xs = sorted(values)
    if not xs:
        return None
    return xs[max(0, math.ceil(p / 100 * len(xs)) - 1)]


def summarize(values) -> dict:
    xs = [v for v in values if v is not None]
    return {
        "count": len(xs),
        "p50": percentile(xs, 50),
        "p95": percentile(xs, 95),
        "p99": percentile(xs, 99),
        "mean": sum(xs) / len(xs) if xs else None,
        "max": max(xs) if xs else None,
    }


class TimelineRecord(NamedTuple):
    t_ms: float
    kv_capacity_blocks: int
    kv_used_blocks: int
    quantized_layers: int
    queue_depth: int


class MetricsReport(dict):
    """The report.json payload; a plain dict with a couple of conveniences."""

    @property
    def p95_ttft_ms(self):
        return self["ttft_ms"]["p95"]

    def to_json(self) -> str:
        return json.dumps(self, sort_keys=True, indent=2)


def _time_weighted_utilization(timeline: list[TimelineRecord]) -> float | None:
    if len(timeline) < 2:
        return None if not timeline else timeline[0].kv_used_blocks / timeline[0].kv_capacity_blocks
    area = span = 0.0
    for cur, nxt in zip(timeline, timeline[1:]):
        dt = nxt.t_ms - cur.t_ms
        area += dt * cur.kv_used_blocks / cur.kv_capacity_blocks
        span += dt
    return area / span if span else None


def build_report(*, arm, fingerprint, slo_ms, requests, timeline, preemptions,
                 static_capacity_blocks, block_bytes, num_layers, precision_changes,
                 morph_counts) -> MetricsReport:
    done = [r for r in requests if r.done_ms is not None]
    ttfts = [r.ttft_ms for r in requests if r.ttft_ms is not None]
    violations = sum(t > slo_ms for t in ttfts)
    throughput = None
    if done:
        span = max(r.done_ms for r in done) - min(r.arrival_ms for r in requests)
        throughput = len(done) / (span / 1000.0) if span > 0 else None
    tokens = sum(r.tokens_generated for r in requests)
    exposed = sum(r.exposed_tokens for r in requests)
    layer_sum = sum(r.exposure_layer_sum for r in requests)
    return MetricsReport({
        "arm": arm,
        "config_fingerprint": fingerprint,
        "slo_ms": slo_ms,
        "requests_total": len(requests),
        "requests_completed": len(done),
        "ttft_ms": summarize(ttfts),
        "tpot_ms": summarize(r.tpot_ms for r in requests),
        "e2e_ms": summarize(r.e2e_ms for r in requests),
        "queueing_ms": summarize(r.queueing_ms for r in requests),
        "slo_violations": violations,
        "slo_violation_rate": violations / len(ttfts) if ttfts else None,
        "preemptions": preemptions,
        "throughput_rps": throughput,
        "kv": {
            "block_bytes": block_bytes,
            "static_capacity_blocks": static_capacity_blocks,
            "peak_capacity_blocks": max((t.kv_capacity_blocks for t in timeline), default=static_capacity_blocks),
            "peak_used_blocks": max((t.kv_used_blocks for t in timeline), default=0),
            "mean_utilization": _time_weighted_utilization(timeline),
        },
        "exposure": {
            "tokens_total": tokens,
            "tokens_exposed": exposed,
            "exposed_fraction": exposed / tokens if tokens else None,
            "mean_quantized_layers_per_token": layer_sum / tokens if tokens else None,
            "num_layers": num_layers,
        },
        "morph": dict(morph_counts, peak_quantized_layers=max((t.quantized_layers for t in timeline), default=0)),
        "precision_timeline": [[e["t_ms"], e["layer"], e["dst"]] for e in precision_changes],
    })


def timeline_per_second(timeline: list[TimelineRecord], interval_ms: float = 1000.0) -> list[TimelineRecord]:
    """Resample the event-boundary timeline onto a regular grid (state at or before each tick)."""
    if not timeline:
        return []
    out, i = [], 0
    end = timeline[-1].t_ms
    k = 0
    while k * interval_ms <= end:
        t = k * interval_ms
        while i + 1 < len(timeline) and timeline[i + 1].t_ms <= t:
            i += 1
        out.append(timeline[i]._replace(t_ms=t))
        k += 1
    return out


def write_outputs(out_dir, result) -> Path:
    """Write report.json, timeline.csv, requests.csv and events.jsonl."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(result.report.to_json() + "\n")
    with open(out / "timeline.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TimelineRecord._fields)
        for rec in timeline_per_second(result.timeline):
            w.writerow([f"{rec.t_ms:g}", *rec[1:]])
    with open(out / "requests.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "arrival_ms", "prompt_tokens", "output_tokens", "ttft_ms", "tpot_ms",
                    "e2e_ms", "queueing_ms", "preemptions", "exposed_tokens"])
        for r in result.requests:
            w.writerow([r.id, r.arrival_ms, r.prompt_tokens, r.output_tokens,
                        *("" if v is None else f"{v:.6f}" for v in (r.ttft_ms, r.tpot_ms, r.e2e_ms, r.queueing_ms)),
                        r.preemptions, r.exposed_tokens])
    with open(out / "events.jsonl", "w") as fh:
        for ev in result.events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    return out
