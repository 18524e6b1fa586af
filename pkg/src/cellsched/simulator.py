"""Discrete-event replay of a trace against a cluster under one scheduling policy."""

from __future__ import annotations

import csv
import heapq
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .cluster import Cluster
from .scheduler import Action, CellCatalog, Scheduler, SchedulerConfig
from .workload import TraceRecord

# tie order at equal timestamps
COMPLETION, ARRIVAL, TICK = 0, 1, 2
KIND_NAMES = {COMPLETION: "job_completion", ARRIVAL: "job_arrival", TICK: "scheduler_tick"}


@dataclass(order=True, frozen=True)
class SimEvent:
    time: float
    kind: int
    job_id: str = ""
    version: int = 0


@dataclass
class JobMetrics:
    job_id: str
    submit_time: float
    jct: float | None
    queuing_time: float | None
    restarts: int
    finished: bool
    deadline_met: bool | None
    dropped_reason: str | None
    gpu_seconds: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Metrics:
    jobs: list[JobMetrics]
    timeline: list[dict]
    avg_jct: float
    avg_queuing_time: float
    avg_throughput: float
    peak_throughput: float
    finished_job_count: int
    dropped_job_count: int
    deadline_satisfactory_ratio: float | None
    mean_restarts: float
    makespan: float
    explored_choices: int
    decisions: int
    events: int

    def summary(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k not in ("jobs", "timeline")}

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "jobs": [j.to_dict() for j in self.jobs]}


@dataclass
class SimResult:
    metrics: Metrics
    actions: list[Action]
    perf: dict = field(default_factory=dict)
    capacity_checks: int = 0


@dataclass
class EventLog:
    """What the loop observed; :func:`compute_metrics` reduces it."""

    trace: list[TraceRecord]
    timeline: list[dict] = field(default_factory=list)
    finish: dict[str, float] = field(default_factory=dict)
    first_start: dict[str, float] = field(default_factory=dict)
    restarts: dict[str, int] = field(default_factory=dict)
    dropped: dict[str, tuple[float, str]] = field(default_factory=dict)
    gpu_seconds: dict[str, float] = field(default_factory=dict)
    end_time: float = 0.0
    explored_choices: int = 0
    decisions: int = 0
    events: int = 0


def _throughput_sample(sched: Scheduler, now: float) -> float:
    total = 0.0
    for j, a in sorted(sched.state.running.items()):
        if now >= a.segment_start:
            total += sched.normalized_tuned(j, a.tuned)
    return total


def run(trace: Sequence[TraceRecord], cluster: Cluster, config: SchedulerConfig | None = None,
        seed: int = 0, catalog: CellCatalog | None = None) -> SimResult:
    """Replay ``trace``; ``seed`` is accepted for interface symmetry (the loop draws nothing)."""
    del seed
    config = config or SchedulerConfig()
    sched = Scheduler(cluster, config, catalog)
    trace = sorted(trace, key=lambda r: (r.submit_time, r.job_id))
    by_id = {r.job_id: r for r in trace}
    if len(by_id) != len(trace):
        raise ValueError("duplicate job ids in trace")
    elog = EventLog(list(trace))
    if not trace:
        return SimResult(compute_metrics(elog), [], {"wall_s": 0.0})

    t_wall = time.perf_counter()
    heap: list[SimEvent] = [SimEvent(r.submit_time, ARRIVAL, r.job_id) for r in trace]
    heap.append(SimEvent(0.0, TICK))
    heapq.heapify(heap)
    arrived: list[TraceRecord] = []
    not_arrived = len(trace)
    busy_since: dict[str, tuple[float, int]] = {}
    checks = 0

    def account(now: float):
        # GPU-seconds for every allocation that changes or ends at `now`
        for j, a in sched.state.running.items():
            if j not in busy_since:
                busy_since[j] = (now, a.option.gpus)
        for j in list(busy_since):
            a = sched.state.running.get(j)
            since, g = busy_since[j]
            if a is None or a.option.gpus != g:
                elog.gpu_seconds[j] = elog.gpu_seconds.get(j, 0.0) + (now - since) * g
                del busy_since[j]
                if a is not None:
                    busy_since[j] = (now, a.option.gpus)

    def apply(actions: list[Action]):
        for act in actions:
            if act.action in ("start", "resume", "migrate", "rescale"):
                a = sched.state.running[act.job_id]
                heapq.heappush(heap, SimEvent(a.finish_time, COMPLETION, act.job_id, a.version))

    def work_left() -> bool:
        return bool(not_arrived or arrived or sched.state.running or sched.state.pending)

    while heap:
        ev = heapq.heappop(heap)
        now = ev.time
        if ev.kind == COMPLETION:
            a = sched.state.running.get(ev.job_id)
            if a is None or a.version != ev.version:
                continue  # superseded by a later placement
            elog.events += 1
            account(now)
            elog.finish[ev.job_id] = now
            apply(sched.sched_departure(now, ev.job_id))
            account(now)
        elif ev.kind == ARRIVAL:
            elog.events += 1
            arrived.append(by_id[ev.job_id])
            not_arrived -= 1
        else:
            elog.events += 1
            account(now)
            apply(sched.sched_arrival(now, arrived))
            arrived = []
            if not sched.state.running and sched.state.pending and not not_arrived:
                apply(sched.retry_pending(now, "idle cluster"))
                if not sched.state.running:
                    sched.drop_pending(now, "unschedulable")
            account(now)
            # sampled after the round so the row describes the interval that follows
            elog.timeline.append(_timeline_row(sched, now))
            if work_left():
                heapq.heappush(heap, SimEvent(now + config.interval, TICK))
        sched.state.check_capacity()
        checks += 1
        elog.end_time = max(elog.end_time, now)

    if sched.state.running or sched.state.pending:
        raise AssertionError("simulation ended with unfinished jobs")
    for info in sched.state.jobs.values():
        j = info.record.job_id
        elog.restarts[j] = info.restarts
        if info.first_start is not None:
            elog.first_start[j] = info.first_start
    elog.dropped = dict(sched.state.dropped)
    elog.explored_choices = sched.explored_choices
    elog.decisions = sched.decisions
    wall = time.perf_counter() - t_wall
    rounds = sched.round_wall_times
    perf = {"wall_s": wall, "rounds": len(rounds),
            "max_round_s": max(rounds, default=0.0),
            "mean_round_s": sum(rounds) / len(rounds) if rounds else 0.0}
    return SimResult(compute_metrics(elog), list(sched.actions), perf, checks)


def _timeline_row(sched: Scheduler, now: float) -> dict:
    row = {"time_s": now, "throughput_norm": _throughput_sample(sched, now),
           "running": len(sched.state.running), "pending": len(sched.state.pending)}
    for t, f in sched.state.free.items():
        row[f"free_{t}"] = f
    return row


def compute_metrics(elog: EventLog) -> Metrics:
    jobs = []
    for r in elog.trace:
        j = r.job_id
        fin = elog.finish.get(j)
        start = elog.first_start.get(j)
        met = None
        if r.deadline is not None:
            met = fin is not None and fin <= r.deadline
        jobs.append(JobMetrics(
            j, r.submit_time,
            None if fin is None else fin - r.submit_time,
            None if start is None else start - r.submit_time,
            elog.restarts.get(j, 0), fin is not None, met,
            elog.dropped[j][1] if j in elog.dropped else None,
            elog.gpu_seconds.get(j, 0.0)))
    done = [m for m in jobs if m.finished]
    started = [m for m in jobs if m.queuing_time is not None]
    samples = elog.timeline
    end = elog.end_time
    if samples and end > samples[0]["time_s"]:
        area = 0.0
        for a, b in zip(samples, samples[1:] + [{"time_s": end}]):
            area += a["throughput_norm"] * (min(b["time_s"], end) - a["time_s"])
        avg_tp = area / (end - samples[0]["time_s"])
    else:
        avg_tp = samples[0]["throughput_norm"] if samples else 0.0
    ddl = [m for m in jobs if m.deadline_met is not None]
    return Metrics(
        jobs=jobs, timeline=samples,
        avg_jct=sum(m.jct for m in done) / len(done) if done else 0.0,
        avg_queuing_time=sum(m.queuing_time for m in started) / len(started) if started else 0.0,
        avg_throughput=avg_tp,
        peak_throughput=max((s["throughput_norm"] for s in samples), default=0.0),
        finished_job_count=len(done),
        dropped_job_count=len(elog.dropped),
        deadline_satisfactory_ratio=(sum(m.deadline_met for m in ddl) / len(ddl)) if ddl else None,
        mean_restarts=sum(m.restarts for m in started) / len(started) if started else 0.0,
        makespan=end,
        explored_choices=elog.explored_choices,
        decisions=elog.decisions,
        events=elog.events,
    )


def write_outputs(result: SimResult, out_dir: "str | Path"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = result.metrics
    (out / "metrics.json").write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")
    cols = list(m.timeline[0]) if m.timeline else ["time_s", "throughput_norm", "running", "pending"]
    with open(out / "timeline.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(m.timeline)
    with open(out / "actions.jsonl", "w") as fh:
        for a in result.actions:
            fh.write(json.dumps(a.to_dict(), sort_keys=True) + "\n")
    (out / "perf.json").write_text(json.dumps(result.perf, indent=2, sort_keys=True) + "\n")
