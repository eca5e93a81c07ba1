"""Deterministic producer/consumer schedule for one CTA's KV loop.

The producer streams K_j/V_j tiles into an s-stage ring buffer over a single,
serialized memory channel. The consumer waits for a tile, pays the barrier
cost, computes, and releases the stage. Load j may not be issued before block
j - s has released its stage. Every event is scheduled at its earliest legal
time.

The Q tile is fetched by a separate async copy issued at t=0 alongside K_0,
so it completes together with the first block load and adds no extra latency.

In ``split`` mode the consumer work is divided between the two warpgroups:
the consumer computes the scores, the softmax and the lower accumulator half
(t_compute/2), then the producer warpgroup, after a named barrier (t_barrier),
updates the upper half (t_compute/2). The stage is released once both halves
are done.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Literal, NamedTuple, TextIO

__all__ = [
    "Event",
    "PipelineTrace",
    "ScheduleConfig",
    "simulate",
    "trace_to_csv",
    "validate_trace",
]

Actor = Literal["producer", "consumer"]
Action = Literal["load_issue", "load_done", "compute_start", "compute_done", "release"]

# tie-break for simultaneous events so the log replays causally
_ACTION_ORDER = {"load_done": 0, "compute_done": 1, "release": 2, "load_issue": 3, "compute_start": 4}
Q_BLOCK = -1


@dataclass(frozen=True)
class ScheduleConfig:
    t_c: int
    stages: int = 2
    t_load: float = 1
    t_compute: float = 1
    t_barrier: float = 0
    split: bool = False

    def __post_init__(self) -> None:
        if self.t_c < 1:
            raise ValueError(f"t_c must be >= 1, got {self.t_c}")
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if not self.t_load > 0 or not self.t_compute > 0:
            raise ValueError("t_load and t_compute must be positive")
        if self.t_barrier < 0:
            raise ValueError("t_barrier must be non-negative")


class Event(NamedTuple):
    time: float
    actor: Actor
    action: Action
    stage: int
    block: int


@dataclass(frozen=True)
class PipelineTrace:
    config: ScheduleConfig
    events: tuple[Event, ...]
    makespan: float
    stall_time: float
    t_load_exposed: float

    def summary(self) -> str:
        cfg = self.config
        return (
            f"t_c={cfg.t_c} stages={cfg.stages} t_load={_fmt(cfg.t_load)} "
            f"t_compute={_fmt(cfg.t_compute)} t_barrier={_fmt(cfg.t_barrier)} "
            f"split={str(cfg.split).lower()} makespan={_fmt(self.makespan)} "
            f"stall_time={_fmt(self.stall_time)}"
        )


def _norm(t: float) -> float:
    return int(t) if float(t).is_integer() else t


def _fmt(t: float) -> str:
    return str(_norm(t))


def simulate(cfg: ScheduleConfig) -> PipelineTrace:
    L, C, B, s = cfg.t_load, cfg.t_compute, cfg.t_barrier, cfg.stages
    work = C / 2 if cfg.split else C
    events: list[Event] = [
        Event(0, "producer", "load_issue", Q_BLOCK, Q_BLOCK),
        Event(L, "producer", "load_done", Q_BLOCK, Q_BLOCK),
    ]
    q_ready = L
    channel_free = 0
    consumer_free = 0
    helper_free = 0
    release: list[float] = []
    consumer_busy = 0

    for j in range(cfg.t_c):
        stage = j % s
        issue = max(channel_free, release[j - s] if j >= s else 0)
        ready = issue + L
        channel_free = ready
        events += [
            Event(issue, "producer", "load_issue", stage, j),
            Event(ready, "producer", "load_done", stage, j),
        ]

        start = max(ready, q_ready, consumer_free) + B
        end = start + work
        consumer_free = end
        consumer_busy += work
        events += [
            Event(start, "consumer", "compute_start", stage, j),
            Event(end, "consumer", "compute_done", stage, j),
        ]
        if cfg.split:
            start_hi = max(end + B, helper_free)
            end_hi = start_hi + work
            helper_free = end_hi
            events += [
                Event(start_hi, "producer", "compute_start", stage, j),
                Event(end_hi, "producer", "compute_done", stage, j),
            ]
            end = end_hi
        release.append(end)
        events.append(Event(end, "consumer", "release", stage, j))

    events = [e._replace(time=_norm(e.time)) for e in events]
    events.sort(key=lambda e: (e.time, _ACTION_ORDER[e.action], e.block, e.actor))
    makespan = _norm(max(e.time for e in events if e.action == "compute_done"))
    t_load_exposed = _norm(L)
    stall = _norm(makespan - t_load_exposed - consumer_busy)
    return PipelineTrace(cfg, tuple(events), makespan, stall, t_load_exposed)


def validate_trace(trace: PipelineTrace) -> list[str]:
    """Replay the event log and report every violated schedule rule.

    Checks ring-buffer safety (release of block j logged before the load of
    block j+s), data readiness (no compute before its tile and Q have landed),
    in-order completion, stage assignment, time monotonicity and the
    stall-time accounting identity. Returns an empty list for a legal trace.
    """
    cfg = trace.config
    problems: list[str] = []
    last_time = float("-inf")
    loaded: set[int] = set()
    released: set[int] = set()
    issued: set[int] = set()
    completed: list[int] = []
    consumer_busy = 0.0
    open_compute: dict[tuple[str, int], float] = {}

    for idx, ev in enumerate(trace.events):
        if ev.time < last_time:
            problems.append(f"event {idx} goes back in time ({ev.time} < {last_time})")
        last_time = ev.time
        if ev.block == Q_BLOCK:
            if ev.action == "load_done":
                loaded.add(Q_BLOCK)
            continue
        if ev.stage != ev.block % cfg.stages:
            problems.append(f"block {ev.block} uses stage {ev.stage}, expected {ev.block % cfg.stages}")
        if ev.action == "load_issue":
            prior = ev.block - cfg.stages
            if prior >= 0 and prior not in released:
                problems.append(f"load of block {ev.block} issued before block {prior} released stage {ev.stage}")
            issued.add(ev.block)
        elif ev.action == "load_done":
            if ev.block not in issued:
                problems.append(f"block {ev.block} finished loading without being issued")
            loaded.add(ev.block)
        elif ev.action == "compute_start":
            if ev.block not in loaded:
                problems.append(f"compute of block {ev.block} started before its load completed")
            if Q_BLOCK not in loaded:
                problems.append(f"compute of block {ev.block} started before Q was loaded")
            open_compute[(ev.actor, ev.block)] = ev.time
        elif ev.action == "compute_done":
            start = open_compute.pop((ev.actor, ev.block), None)
            if start is None:
                problems.append(f"compute of block {ev.block} finished without starting")
            elif ev.actor == "consumer":
                consumer_busy += ev.time - start
        elif ev.action == "release":
            expected = completed[-1] + 1 if completed else 0
            if ev.block != expected:
                problems.append(f"block {ev.block} completed out of order, expected {expected}")
            completed.append(ev.block)
            released.add(ev.block)

    if completed != list(range(cfg.t_c)):
        problems.append(f"completed blocks {completed} != 0..{cfg.t_c - 1}")
    expected_stall = trace.makespan - trace.t_load_exposed - consumer_busy
    if abs(expected_stall - trace.stall_time) > 1e-9:
        problems.append(f"stall_time {trace.stall_time} != makespan - exposed load - busy = {expected_stall}")
    return problems


def trace_to_csv(trace: PipelineTrace, out: TextIO | None = None) -> str:
    """Write ``time,actor,action,stage,block`` rows; returns the text written."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time", "actor", "action", "stage", "block"])
    for ev in trace.events:
        writer.writerow([_fmt(ev.time), ev.actor, ev.action, ev.stage, ev.block])
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def read_trace_csv(lines: Iterable[str]) -> list[Event]:
    rows = csv.DictReader(lines)
    return [
        Event(_norm(float(r["time"])), r["actor"], r["action"], int(r["stage"]), int(r["block"]))
        for r in rows
    ]
