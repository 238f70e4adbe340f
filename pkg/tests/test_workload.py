import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphsim.workload import (
    HEADER,
    Trace,
    TraceEvent,
    TraceFormatError,
    downscale,
    inter_arrival_ms,
    parse_trace,
    serialize_trace,
    synth_burst,
    synth_poisson,
    write_trace,
)


def _trace(arrivals, prompt=8, output=4):
    return Trace(tuple(TraceEvent(a, prompt, output) for a in arrivals))


def test_parse_single_line(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("1000,512,256\n")
    assert parse_trace(p).events == (TraceEvent(1000, 512, 256),)


def test_parse_empty_file(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    assert len(parse_trace(p)) == 0


def test_equal_timestamps_keep_file_order(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,8,4\n0,16,8\n")
    tr = parse_trace(p)
    assert [e.prompt_tokens for e in tr] == [8, 16]
    assert not tr.resorted


def test_unsorted_input_is_stably_sorted_and_flagged(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("# comment\n50,1,1\n\n10,2,2\n50,3,3\n10,4,4\n")
    tr = parse_trace(p)
    assert tr.resorted
    assert [(e.arrival_ms, e.prompt_tokens) for e in tr] == [(10, 2), (10, 4), (50, 1), (50, 3)]


@pytest.mark.parametrize("body, lineno", [
    ("0,1,1\n5,abc,1\n", 2),
    ("0,1\n", 1),
    ("# header\n0,0,4\n", 2),
    ("0,1,1\n1,1,-3\n", 2),
    ("-1,1,1\n", 1),
])
def test_malformed_lines_report_line_number(tmp_path, body, lineno):
    p = tmp_path / "t.csv"
    p.write_text(body)
    with pytest.raises(TraceFormatError) as info:
        parse_trace(p)
    assert info.value.lineno == lineno
    assert f"line {lineno}" in str(info.value)


def test_unreadable_file(tmp_path):
    with pytest.raises(TraceFormatError):
        parse_trace(tmp_path / "missing.csv")


def test_event_validation():
    with pytest.raises(ValueError):
        TraceEvent(0, 0, 1)
    with pytest.raises(ValueError):
        TraceEvent(-5, 1, 1)


def test_serialize_has_header():
    text = serialize_trace(_trace([0, 3]))
    assert text.splitlines()[0] == HEADER


events_st = st.lists(
    st.tuples(st.integers(0, 10**7), st.integers(1, 10**5), st.integers(1, 10**5)), max_size=40
)


@given(events_st)
@settings(max_examples=60, deadline=None)
def test_roundtrip(tmp_path_factory, raw):
    tr = Trace.from_events(TraceEvent(*r) for r in raw)
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_trace(tr, path)
    back = parse_trace(path)
    assert back.events == tr.events
    assert not back.resorted


def test_downscale_examples():
    assert _trace([0, 10, 20]).arrivals == [0, 10, 20]
    assert downscale(_trace([0, 10, 20]), 4.75).arrivals == [0, 48, 95]
    assert downscale(_trace([100, 110]), 1.75).arrivals == [100, 118]
    tr = _trace([3, 7, 7, 19])
    assert downscale(tr, 1.0) == tr


@pytest.mark.parametrize("factor", [0, -1.5, float("nan"), float("inf")])
def test_downscale_rejects_bad_factor(factor):
    with pytest.raises(ValueError):
        downscale(_trace([0, 1]), factor)


arrivals_st = st.lists(st.integers(0, 10**6), min_size=1, max_size=30).map(sorted)
factor_st = st.floats(0.05, 8.0, allow_nan=False)


@given(arrivals_st, factor_st)
@settings(max_examples=100, deadline=None)
def test_downscale_preserves_count_tokens_and_order(arrivals, factor):
    tr = Trace(tuple(TraceEvent(a, i + 1, 2 * i + 1) for i, a in enumerate(arrivals)))
    out = downscale(tr, factor)
    assert len(out) == len(tr)
    assert [(e.prompt_tokens, e.output_tokens) for e in out] == [(e.prompt_tokens, e.output_tokens) for e in tr]
    assert out.arrivals[0] == tr.arrivals[0]
    assert out.arrivals == sorted(out.arrivals)


@given(arrivals_st, factor_st, factor_st)
@settings(max_examples=150, deadline=None)
def test_downscale_composition_rounding_tolerance(arrivals, a, b):
    tr = _trace(arrivals)
    twice = downscale(downscale(tr, a), b).arrivals
    once = downscale(tr, a * b).arrivals
    # each stage rounds offsets once; the first rounding error is then stretched by b
    bound = 0.5 * b + 0.5 + 1e-9
    for x, y in zip(twice, once):
        assert abs(x - y) <= bound + 0.5
    if b <= 1:
        gaps_twice = inter_arrival_ms(Trace(tuple(TraceEvent(t, 1, 1) for t in twice)))
        gaps_once = inter_arrival_ms(Trace(tuple(TraceEvent(t, 1, 1) for t in once)))
        for g1, g2 in zip(gaps_twice, gaps_once):
            assert abs(g1 - g2) <= 2


def test_synth_deterministic_and_sorted():
    a = synth_burst(5, 1.0, 6.0, 2000, 3000, 10000, 64, 32)
    b = synth_burst(5, 1.0, 6.0, 2000, 3000, 10000, 64, 32)
    assert a == b
    assert a.arrivals == sorted(a.arrivals)
    assert all(0 <= t < 10000 for t in a.arrivals)
    assert synth_burst(6, 1.0, 6.0, 2000, 3000, 10000, 64, 32) != a


def test_synth_zero_duration_is_empty():
    assert len(synth_burst(1, 2.0, 2.0, 0, 0, 0, 4, 4)) == 0


@pytest.mark.parametrize("args", [
    (1.0, 2.0, 5000, 6000, 10000),   # window past the end
    (1.0, 2.0, -1, 10, 10000),
    (0.0, 2.0, 0, 10, 10000),
    (1.0, -2.0, 0, 10, 10000),
    (1.0, 2.0, 0, 0, -5),
])
def test_synth_rejects_invalid_window_or_rate(args):
    with pytest.raises(ValueError):
        synth_burst(1, *args, 4, 4)


def test_homogeneous_count_within_three_sigma():
    rps, total_ms = 5.0, 20_000
    mean = rps * total_ms / 1000
    counts = np.array([len(synth_burst(s, rps, rps, 4000, 5000, total_ms, 8, 8)) for s in range(100)])
    # the 100-seed average sits within 3 sigma of the Poisson mean
    assert abs(counts.mean() - mean) <= 3 * math.sqrt(mean / len(counts))
    # and the spread matches Poisson (variance == mean)
    assert abs(counts.var(ddof=1) / mean - 1) < 0.35
    assert np.sum(np.abs(counts - mean) > 3 * math.sqrt(mean)) <= 2


def test_burst_window_is_denser():
    tr = synth_burst(3, 1.0, 10.0, 20_000, 10_000, 50_000, 8, 8)
    inside = sum(20_000 <= t < 30_000 for t in tr.arrivals)
    outside = len(tr) - inside
    assert inside / 10 > 3 * outside / 40


def test_poisson_is_flat_burst():
    assert synth_poisson(2, 3.0, 5000, 8, 8) == synth_burst(2, 3.0, 3.0, 0, 0, 5000, 8, 8)
