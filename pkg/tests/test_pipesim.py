import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from etaplab.pipesim import Event, ScheduleConfig, read_trace_csv, simulate, trace_to_csv, validate_trace


def test_config_validation():
    for bad in (dict(t_c=0), dict(t_c=1, stages=0), dict(t_c=1, t_load=0), dict(t_c=1, t_barrier=-1)):
        with pytest.raises(ValueError):
            ScheduleConfig(**bad)


def test_hand_stepped_compute_bound():
    trace = simulate(ScheduleConfig(t_c=4, stages=2, t_load=3, t_compute=5))
    blocks = [(e.time, e.actor, e.action, e.block) for e in trace.events if e.block >= 0]
    assert blocks == [
        (0, "producer", "load_issue", 0),
        (3, "producer", "load_done", 0),
        (3, "producer", "load_issue", 1),
        (3, "consumer", "compute_start", 0),
        (6, "producer", "load_done", 1),
        (8, "consumer", "compute_done", 0),
        (8, "consumer", "release", 0),
        (8, "producer", "load_issue", 2),
        (8, "consumer", "compute_start", 1),
        (11, "producer", "load_done", 2),
        (13, "consumer", "compute_done", 1),
        (13, "consumer", "release", 1),
        (13, "producer", "load_issue", 3),
        (13, "consumer", "compute_start", 2),
        (16, "producer", "load_done", 3),
        (18, "consumer", "compute_done", 2),
        (18, "consumer", "release", 2),
        (18, "consumer", "compute_start", 3),
        (23, "consumer", "compute_done", 3),
        (23, "consumer", "release", 3),
    ]
    assert trace.makespan == 23
    assert trace.stall_time == 0


def test_hand_stepped_load_bound():
    trace = simulate(ScheduleConfig(t_c=4, stages=2, t_load=10, t_compute=5))
    starts = [e.time for e in trace.events if e.action == "compute_start"]
    assert starts == [10, 20, 30, 40]
    assert trace.makespan == 45
    assert trace.stall_time == 15


times = st.integers(1, 50)


@given(st.integers(1, 64), times, times, st.integers(0, 10))
def test_single_stage_serializes(t_c, L, C, B):
    trace = simulate(ScheduleConfig(t_c, 1, L, C, B))
    assert trace.makespan == t_c * (L + C + B)


@given(st.integers(1, 64), times, times)
def test_double_buffer_compute_bound(t_c, L, C):
    L = min(L, C)
    assert simulate(ScheduleConfig(t_c, 2, L, C)).makespan == L + t_c * C


@given(st.integers(1, 64), times)
def test_double_buffer_load_bound(t_c, C):
    assert simulate(ScheduleConfig(t_c, 2, 2 * C, C)).makespan == t_c * 2 * C + C


@given(st.integers(1, 40), st.integers(1, 6), times, times, st.integers(0, 10), st.booleans())
def test_trace_is_legal_and_bounded(t_c, s, L, C, B, split):
    trace = simulate(ScheduleConfig(t_c, s, L, C, B, split))
    assert validate_trace(trace) == []
    assert trace.makespan >= L + (C / 2 if split else C)
    if not split:
        assert trace.makespan >= max(t_c * C, t_c * L)
        assert trace.makespan >= L + C


@given(st.integers(1, 40), times, times, st.integers(0, 10), st.booleans())
def test_more_stages_never_hurt(t_c, L, C, B, split):
    spans = [simulate(ScheduleConfig(t_c, s, L, C, B, split)).makespan for s in range(1, 6)]
    assert all(a >= b for a, b in zip(spans, spans[1:]))
    if B == 0 and not split:
        assert len(set(spans[1:])) == 1


@given(st.integers(1, 30), times, times, st.integers(0, 5))
def test_stall_accounting(t_c, L, C, B):
    trace = simulate(ScheduleConfig(t_c, 2, L, C, B))
    assert trace.stall_time == trace.makespan - trace.t_load_exposed - t_c * C


def test_split_mode_overlaps_halves():
    folded = simulate(ScheduleConfig(8, 2, 2, 8))
    split = simulate(ScheduleConfig(8, 2, 2, 8, split=True))
    assert split.makespan < folded.makespan
    assert validate_trace(split) == []
    assert {e.actor for e in split.events if e.action == "compute_start"} == {"producer", "consumer"}


def test_validator_flags_early_load():
    trace = simulate(ScheduleConfig(3, 1, 2, 2))
    events = list(trace.events)
    # move block 1's load issue before block 0's release
    idx = next(i for i, e in enumerate(events) if e.action == "load_issue" and e.block == 1)
    ev = events.pop(idx)
    events.insert(2, ev._replace(time=0))
    bad = type(trace)(trace.config, tuple(events), trace.makespan, trace.stall_time, trace.t_load_exposed)
    assert any("issued before block 0 released" in p for p in validate_trace(bad))


def test_validator_flags_compute_before_load():
    trace = simulate(ScheduleConfig(2, 2, 4, 1))
    events = [e for e in trace.events if not (e.action == "load_done" and e.block == 1)]
    bad = type(trace)(trace.config, tuple(events), trace.makespan, trace.stall_time, trace.t_load_exposed)
    assert any("before its load completed" in p for p in validate_trace(bad))


def test_csv_roundtrip():
    trace = simulate(ScheduleConfig(3, 2, 1, 3, split=True))
    text = trace_to_csv(trace)
    assert text.splitlines()[0] == "time,actor,action,stage,block"
    assert read_trace_csv(io.StringIO(text)) == list(trace.events)
