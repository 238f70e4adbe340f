"""Arrival traces: CSV parsing/serialization, rate downscaling and synthetic bursts.

Trace files hold one request per line::

    # arrival_ms,prompt_tokens,output_tokens
    1000,512,256

Lines starting with ``#`` and blank lines are ignored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TraceEvent",
    "Trace",
    "TraceFormatError",
    "parse_trace",
    "serialize_trace",
    "write_trace",
    "downscale",
    "synth_burst",
    "synth_poisson",
]

HEADER = "# arrival_ms,prompt_tokens,output_tokens"


class TraceFormatError(ValueError):
    """Raised for malformed trace files; carries the offending line number."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class TraceEvent:
    arrival_ms: int
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.arrival_ms < 0:
            raise ValueError(f"arrival_ms must be >= 0, got {self.arrival_ms}")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValueError(
                f"token counts must be >= 1, got prompt={self.prompt_tokens} "
                f"output={self.output_tokens}"
            )


@dataclass(frozen=True)
class Trace:
    events: tuple[TraceEvent, ...] = ()
    source_label: str = ""
    # set when the input was not sorted and had to be reordered
    resorted: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def arrivals(self) -> list[int]:
        return [e.arrival_ms for e in self.events]

    @classmethod
    def from_events(cls, events: Iterable[TraceEvent], source_label: str = "") -> "Trace":
        events = list(events)
        ordered = sorted(events, key=lambda e: e.arrival_ms)  # stable
        return cls(tuple(ordered), source_label, resorted=ordered != events)


def _parse_int(text: str, name: str, lineno: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise TraceFormatError(f"{name} is not an integer: {text.strip()!r}", lineno) from None


def parse_trace(path) -> Trace:
    """Read a three-column CSV trace.

    Unsorted input is stably sorted by arrival time and the returned trace
    has ``resorted=True``.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace {path}: {exc}") from exc

    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise TraceFormatError(f"expected 3 fields, got {len(parts)}", lineno)
        arrival = _parse_int(parts[0], "arrival_ms", lineno)
        prompt = _parse_int(parts[1], "prompt_tokens", lineno)
        output = _parse_int(parts[2], "output_tokens", lineno)
        if arrival < 0:
            raise TraceFormatError(f"negative arrival_ms {arrival}", lineno)
        if prompt < 1 or output < 1:
            raise TraceFormatError(
                f"token counts must be positive (prompt={prompt}, output={output})", lineno
            )
        events.append(TraceEvent(arrival, prompt, output))
    return Trace.from_events(events, source_label=str(path))


def serialize_trace(trace: Trace) -> str:
    lines = [HEADER]
    lines.extend(f"{e.arrival_ms},{e.prompt_tokens},{e.output_tokens}" for e in trace.events)
    return "\n".join(lines) + "\n"


def write_trace(trace: Trace, path) -> None:
    Path(path).write_text(serialize_trace(trace))


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def downscale(trace: Trace, factor: float) -> Trace:
    """Stretch inter-arrival gaps by ``factor`` (request rate divided by ``factor``).

    Offsets from the first arrival are scaled exactly and then rounded
    half-up to whole milliseconds, so rounding error never accumulates.
    """
    if not factor > 0 or not math.isfinite(factor):
        raise ValueError(f"downscale factor must be a positive number, got {factor}")
    if not trace.events:
        return Trace((), trace.source_label)
    f = Fraction(factor)
    first = trace.events[0].arrival_ms
    events = tuple(
        TraceEvent(
            first + _round_half_up((e.arrival_ms - first) * f),
            e.prompt_tokens,
            e.output_tokens,
        )
        for e in trace.events
    )
    return Trace(events, trace.source_label)


def _poisson_segment(rng: np.random.Generator, rate_rps: float, start_ms: float, end_ms: float) -> list[float]:
    # Standard exponentials scaled by the mean gap: a higher rate with the same
    # seed yields a time-compressed copy of the same arrival pattern.
    times = []
    mean_gap_ms = 1000.0 / rate_rps
    t = start_ms
    while True:
        t += rng.standard_exponential() * mean_gap_ms
        if t >= end_ms:
            return times
        times.append(t)


def synth_burst(
    seed: int,
    base_rps: float,
    burst_rps: float,
    burst_start_ms: int,
    burst_len_ms: int,
    total_ms: int,
    prompt_tokens: int,
    output_tokens: int,
) -> Trace:
    """Piecewise-homogeneous Poisson trace with one burst window.

    Arrivals follow ``base_rps`` on ``[0, burst_start)`` and
    ``[burst_start + burst_len, total)``, and ``burst_rps`` inside the burst.
    """
    if base_rps <= 0 or burst_rps <= 0:
        raise ValueError("rates must be positive")
    if total_ms < 0:
        raise ValueError(f"total_ms must be >= 0, got {total_ms}")
    if burst_len_ms < 0 or burst_start_ms < 0 or burst_start_ms + burst_len_ms > total_ms:
        raise ValueError(
            f"burst window [{burst_start_ms}, {burst_start_ms + burst_len_ms}) "
            f"is not inside [0, {total_ms}]"
        )
    if prompt_tokens < 1 or output_tokens < 1:
        raise ValueError("token counts must be >= 1")
    if total_ms == 0:
        return Trace((), f"synth:seed={seed}")

    rng = np.random.default_rng(seed)
    burst_end = burst_start_ms + burst_len_ms
    times = []
    times += _poisson_segment(rng, base_rps, 0.0, float(burst_start_ms))
    times += _poisson_segment(rng, burst_rps, float(burst_start_ms), float(burst_end))
    times += _poisson_segment(rng, base_rps, float(burst_end), float(total_ms))
    events = [TraceEvent(int(math.floor(t)), prompt_tokens, output_tokens) for t in times]
    label = (
        f"synth:seed={seed},base={base_rps},burst={burst_rps},"
        f"window={burst_start_ms}+{burst_len_ms},total={total_ms}"
    )
    return Trace(tuple(events), label)


def synth_poisson(seed: int, rps: float, total_ms: int, prompt_tokens: int, output_tokens: int) -> Trace:
    """Homogeneous Poisson trace (a burst with equal rates and an empty window)."""
    return synth_burst(seed, rps, rps, 0, 0, total_ms, prompt_tokens, output_tokens)


def inter_arrival_ms(trace: Trace) -> Sequence[int]:
    a = trace.arrivals
    return [b - x for x, b in zip(a, a[1:])]
