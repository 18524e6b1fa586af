"""Cell-based greedy scheduling with resource scaling and opportunistic execution.

The scheduler works on a *virtual* assignment (job id -> chosen Cell option)
and only turns it into real actions when a scheduling round ends.  Choices are
ranked by the summed normalized throughput of every placed job.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping

from .cell import Cell, generate_cells
from .cluster import Cluster
from .costmodel import DEFAULT_COSTS, CostModelConfig
from .estimator import CellEstimate, InfeasibleCell, estimate_cell
from .tuner import TunedPlan, tune
from .workload import TraceRecord

log = logging.getLogger(__name__)


class Policy(str, Enum):
    CRIUS = "crius"
    CRIUS_DDL = "crius_ddl"
    FCFS = "fcfs"
    NO_ADAPTIVITY = "crius_no_adaptivity"
    NO_HETEROGENEITY = "crius_no_heterogeneity"


@dataclass(frozen=True)
class SchedulerConfig:
    search_depth: int = 3
    interval: float = 300.0
    restart_penalty: float = 30.0
    policy: Policy = Policy.CRIUS
    normalization: str = "reference"  # or "raw": plain samples/s
    scale_breadth: int = 8  # running jobs considered as movers per level
    beam_width: int = 16  # partial choices expanded per level
    max_plans: int = 1 << 16
    min_move_gain: float = 0.05  # normalized throughput a rescale must buy

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.search_depth < 1:
            raise ValueError("search_depth must be >= 1")
        if self.interval <= 0:
            raise ValueError("interval must be > 0")
        if self.restart_penalty < 0:
            raise ValueError("restart_penalty must be >= 0")
        if self.normalization not in ("reference", "raw"):
            raise ValueError("normalization must be 'reference' or 'raw'")
        if self.scale_breadth < 1 or self.beam_width < 1:
            raise ValueError("scale_breadth and beam_width must be >= 1")


@dataclass(frozen=True)
class Option:
    """A job's best Cell for one (GPU type, GPU count)."""

    job_id: str
    gpu_type: str
    gpus: int
    cell: Cell
    estimate: CellEstimate
    norm: float  # estimated normalized throughput

    @property
    def slot(self) -> tuple[str, int]:
        return (self.gpu_type, self.gpus)


class CellCatalog:
    """Memoized Cell generation, estimation and tuning, shareable across runs."""

    def __init__(self, cluster: Cluster, costs: CostModelConfig = DEFAULT_COSTS,
                 max_plans: int | None = 1 << 16):
        self.cluster = cluster
        self.costs = costs
        self.max_plans = max_plans
        self._estimates: dict[tuple, CellEstimate | None] = {}
        self._tuned: dict[tuple, TunedPlan] = {}
        self._best: dict[tuple, list[tuple[str, int, Cell, CellEstimate]]] = {}

    def estimate(self, cell: Cell) -> CellEstimate | None:
        key = cell.key
        if key not in self._estimates:
            self._estimates[key] = self._estimate_uncached(cell)
        return self._estimates[key]

    def tune(self, cell: Cell) -> TunedPlan:
        key = cell.key
        if key not in self._tuned:
            est = self.estimate(cell)
            if est is None:
                raise InfeasibleCell(f"{cell.job_id}: Cell {key} has no feasible plan")
            g = self.cluster.group(cell.gpu_type)
            self._tuned[key] = tune(cell, est, g, self.cluster.interconnects, self.costs)
        return self._tuned[key]

    def best_cells(self, job: TraceRecord) -> list[tuple[str, int, Cell, CellEstimate]]:
        """Highest-estimate Cell per (type, count), in cluster then count order."""
        key = (job.model.key, job.requested_gpus)
        if key not in self._best:
            best: dict[tuple[str, int], tuple[Cell, CellEstimate]] = {}
            for cell in generate_cells(job, self.cluster, self.max_plans):
                est = self.estimate(cell)
                if est is None:
                    continue
                slot = (cell.gpu_type, cell.total_gpus)
                cur = best.get(slot)
                if cur is None or est.throughput > cur[1].throughput:
                    best[slot] = (cell, est)
            order = {t: i for i, t in enumerate(self.cluster.gpu_types)}
            self._best[key] = [(t, g, c, e) for (t, g), (c, e)
                               in sorted(best.items(), key=lambda kv: (order[kv[0][0]], kv[0][1]))]
        return self._best[key]

    def prewarm(self, jobs: Iterable[TraceRecord], workers: int = 1):
        """Estimate every Cell the jobs can use, fanning out over ``workers`` threads.

        Results are stored in Cell-key order, so the outcome is independent of
        ``workers``.
        """
        todo: dict[tuple, Cell] = {}
        for job in jobs:
            for cell in generate_cells(job, self.cluster, self.max_plans):
                if cell.key not in self._estimates:
                    todo.setdefault(cell.key, cell)
        keys = sorted(todo, key=repr)
        if workers > 1 and len(keys) > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(self._estimate_uncached, (todo[k] for k in keys)))
        else:
            results = [self._estimate_uncached(todo[k]) for k in keys]
        for k, r in zip(keys, results):
            self._estimates[k] = r

    def _estimate_uncached(self, cell: Cell) -> CellEstimate | None:
        g = self.cluster.group(cell.gpu_type)
        try:
            return estimate_cell(cell, g, self.cluster.interconnects, self.costs)
        except InfeasibleCell:
            return None

    def min_feasible_gpus(self, job: TraceRecord) -> int | None:
        """Smallest power-of-two count at which the job has any feasible Cell."""
        g = 1
        while g <= max(gr.capacity for gr in self.cluster.groups):
            probe = replace(job, requested_gpus=g)
            if any(gg == g for _, gg, _, _ in self.best_cells(probe)):
                return g
            g *= 2
        return None


@dataclass
class JobInfo:
    record: TraceRecord
    options: list[Option]
    ref_option: Option | None
    ref_estimate: float
    ref_tuned: float
    order: int  # arrival rank
    last_type: str | None = None
    started: bool = False
    suspended: bool = False
    restarts: int = 0
    first_start: float | None = None
    remaining: int | None = None  # iterations left while suspended
    version: int = 0  # bumps on every (re)placement


@dataclass
class Allocation:
    option: Option
    tuned: TunedPlan
    segment_start: float  # iterations (re)start here, after any restart penalty
    base_remaining: int
    opportunistic: bool = False
    version: int = 0

    @property
    def latency(self) -> float:
        return self.tuned.iteration_latency

    @property
    def finish_time(self) -> float:
        return self.segment_start + self.base_remaining * self.latency

    def remaining_at(self, t: float) -> int:
        if t <= self.segment_start:
            return self.base_remaining
        done = int(math.floor((t - self.segment_start) / self.latency))
        return max(self.base_remaining - done, 1)


@dataclass(frozen=True)
class Action:
    time: float
    job_id: str
    action: str  # start | migrate | rescale | suspend | resume
    gpu_type: str | None
    n_gpus: int
    plan: list | None
    reason: str

    def to_dict(self) -> dict:
        return {"time": self.time, "job_id": self.job_id, "action": self.action,
                "gpu_type": self.gpu_type, "n_gpus": self.n_gpus, "plan": self.plan,
                "reason": self.reason}


@dataclass(frozen=True)
class SchedulingChoice:
    """A candidate assignment, stored as changes on top of a base assignment."""

    base: Mapping[str, Option]
    changes: tuple[tuple[str, Option], ...]
    estimated_cluster_throughput: float
    moves: int = 0  # running jobs whose Cell changed

    @property
    def assignment(self) -> dict[str, Option]:
        out = dict(self.base)
        out.update(self.changes)
        return out


class SlotAllocator:
    """Per-type GPU slot ownership; keeps placements disjoint."""

    def __init__(self, capacities: Mapping[str, int]):
        self.owner = {t: [None] * c for t, c in capacities.items()}

    def allocate(self, job_id: str, gpu_type: str, n: int) -> list[int]:
        slots = self.owner[gpu_type]
        # prefer an aligned contiguous block, like a buddy allocator
        for start in range(0, len(slots) - n + 1, n):
            if all(s is None for s in slots[start:start + n]):
                picked = list(range(start, start + n))
                break
        else:
            picked = [i for i, s in enumerate(slots) if s is None][:n]
        if len(picked) < n:
            raise AssertionError(f"{gpu_type}: cannot place {n} GPUs for {job_id}")
        for i in picked:
            assert slots[i] is None, "GPU assigned twice"
            slots[i] = job_id
        return picked

    def release(self, job_id: str):
        for slots in self.owner.values():
            for i, s in enumerate(slots):
                if s == job_id:
                    slots[i] = None

    def used(self, gpu_type: str) -> int:
        return sum(1 for s in self.owner[gpu_type] if s is not None)


@dataclass
class ClusterState:
    capacity: dict[str, int]
    jobs: dict[str, JobInfo] = field(default_factory=dict)
    running: dict[str, Allocation] = field(default_factory=dict)
    pending: list[str] = field(default_factory=list)
    finished: dict[str, float] = field(default_factory=dict)
    dropped: dict[str, tuple[float, str]] = field(default_factory=dict)

    @property
    def free(self) -> dict[str, int]:
        out = dict(self.capacity)
        for a in self.running.values():
            out[a.option.gpu_type] -= a.option.gpus
        return out

    @property
    def opportunistic(self) -> set[str]:
        return {j for j, a in self.running.items() if a.opportunistic}

    @property
    def cells_set(self) -> dict[str, list[Option]]:
        return {j: info.options for j, info in self.jobs.items()}

    def check_capacity(self):
        for t, f in self.free.items():
            if f < 0 or f > self.capacity[t]:
                raise AssertionError(f"capacity violated on {t}: free={f}")


def _usage(assignment: Mapping[str, Option]) -> dict[str, int]:
    out: dict[str, int] = {}
    for o in assignment.values():
        out[o.gpu_type] = out.get(o.gpu_type, 0) + o.gpus
    return out


class Scheduler:
    def __init__(self, cluster: Cluster, config: SchedulerConfig | None = None,
                 catalog: CellCatalog | None = None):
        self.cluster = cluster
        self.config = config or SchedulerConfig()
        self.catalog = catalog or CellCatalog(cluster, max_plans=self.config.max_plans)
        self.state = ClusterState({g.gpu.type_name: g.capacity for g in cluster.groups})
        self.slots = SlotAllocator(self.state.capacity)
        self.actions: list[Action] = []
        self.explored_choices = 0
        self.decisions = 0
        self.round_wall_times: list[float] = []
        self._now = 0.0

    @property
    def policy(self) -> Policy:
        return self.config.policy

    # ---- job registration -------------------------------------------------

    def register(self, job: TraceRecord) -> JobInfo:
        cells = self.catalog.best_cells(job)
        info = JobInfo(job, [], None, 1.0, 1.0, len(self.state.jobs))
        ref = None
        at_ng = [c for c in cells if c[1] == job.requested_gpus]
        pref = [c for c in at_ng if c[0] == job.preferred_gpu_type]
        pool = pref or at_ng or cells
        if pool:
            ref = max(pool, key=lambda c: c[3].throughput)
        if ref is not None and self.config.normalization == "reference":
            info.ref_estimate = ref[3].throughput
            info.ref_tuned = self.catalog.tune(ref[2]).throughput(job.model.global_batch_size)
        info.options = [Option(job.job_id, t, g, replace(c, job_id=job.job_id), e,
                               e.throughput / info.ref_estimate) for t, g, c, e in cells]
        if ref is not None:
            info.ref_option = next(o for o in info.options if o.slot == (ref[0], ref[1]))
        self.state.jobs[job.job_id] = info
        return info

    def normalized_tuned(self, job_id: str, tuned: TunedPlan) -> float:
        info = self.state.jobs[job_id]
        return tuned.throughput(info.record.model.global_batch_size) / info.ref_tuned

    def admission_options(self, job_id: str) -> list[Option]:
        info = self.state.jobs[job_id]
        opts = info.options
        if self.policy in (Policy.NO_ADAPTIVITY, Policy.FCFS):
            opts = [o for o in opts if o.gpus == info.record.requested_gpus]
        if self.policy is Policy.NO_HETEROGENEITY and info.last_type is not None:
            opts = [o for o in opts if o.gpu_type == info.last_type]
        return opts

    def move_options(self, current: Option) -> list[Option]:
        out = []
        for o in self.state.jobs[current.job_id].options:
            if o.slot == current.slot:
                continue
            if self.policy is Policy.NO_ADAPTIVITY and o.gpus != current.gpus:
                continue
            if self.policy is Policy.NO_HETEROGENEITY and o.gpu_type != current.gpu_type:
                continue
            out.append(o)
        return out

    # ---- deadlines --------------------------------------------------------

    def _remaining(self, job_id: str) -> int:
        a = self.state.running.get(job_id)
        if a is not None:
            return a.remaining_at(self._now)
        info = self.state.jobs[job_id]
        return info.remaining if info.remaining is not None else info.record.iterations

    def _finish_if(self, job_id: str, opt: Option) -> float:
        """Completion time if the job (re)starts now on ``opt``."""
        info = self.state.jobs[job_id]
        pen = self.config.restart_penalty if info.started else 0.0
        lat = self.catalog.tune(opt.cell).iteration_latency
        return self._now + pen + self._remaining(job_id) * lat

    def _meets_deadline(self, job_id: str, opt: Option) -> bool:
        dl = self.state.jobs[job_id].record.deadline
        return dl is None or self._finish_if(job_id, opt) <= dl

    def deadline_hopeless(self, job_id: str) -> bool:
        if self.policy is not Policy.CRIUS_DDL:
            return False
        if self.state.jobs[job_id].record.deadline is None:
            return False
        return not any(self._meets_deadline(job_id, o) for o in self.admission_options(job_id))

    # ---- choice enumeration ----------------------------------------------

    def _movers(self, virtual: Mapping[str, Option], exclude: str | None) -> list[str]:
        jobs = [j for j in virtual if j != exclude]
        jobs.sort(key=lambda j: (virtual[j].norm / virtual[j].gpus, j))
        return jobs[:self.config.scale_breadth]

    def scale_resource(self, virtual: Mapping[str, Option], job: str | None,
                       depth: int) -> list[SchedulingChoice]:
        """Capacity-respecting choices reachable with up to ``depth`` rescaling moves.

        Level k holds every choice with k moves on running jobs that extends a
        level k-1 choice kept by the beam; every level is emitted, the beam
        only limits which choices are extended further.
        """
        if depth < 1:
            raise ValueError("search depth must be >= 1")
        types = list(self.state.capacity)
        tix = {t: i for i, t in enumerate(types)}
        cap = [self.state.capacity[t] for t in types]
        base_usage = [0] * len(types)
        for o in virtual.values():
            base_usage[tix[o.gpu_type]] += o.gpus
        base_tp = sum(o.norm for o in virtual.values())

        def overflow(u):
            return sum(x - c for x, c in zip(u, cap) if x > c)

        # partial choice: (changes, dedupe key, usage, throughput, overflow)
        if job is None:
            roots = [((), frozenset(), base_usage, base_tp, overflow(base_usage))]
        else:
            roots = []
            for o in self.admission_options(job):
                u = list(base_usage)
                u[tix[o.gpu_type]] += o.gpus
                roots.append((((job, o),), frozenset([(job, o.slot)]), u, base_tp + o.norm,
                              overflow(u)))
        explored = list(roots)
        seen = {r[1] for r in roots}
        frontier = roots
        movers = self._movers(virtual, job)
        alts = []
        for m in movers:
            cur = virtual[m]
            alts.append((m, [(o, (m, o.slot), tix[cur.gpu_type], cur.gpus, tix[o.gpu_type],
                              o.gpus, o.norm - cur.norm) for o in self.move_options(cur)]))
        for _ in range(depth):
            nxt = []
            for changes, key, usage, tp, _ov in frontier:
                moved = {j for j, _ in changes}
                for m, options in alts:
                    if m in moved:
                        continue
                    for o, item, ti_old, g_old, ti_new, g_new, dtp in options:
                        k2 = key | {item}
                        if k2 in seen:
                            continue
                        seen.add(k2)
                        u = list(usage)
                        u[ti_old] -= g_old
                        u[ti_new] += g_new
                        nxt.append((changes + ((m, o),), k2, u, tp + dtp, overflow(u)))
            if not nxt:
                break
            explored.extend(nxt)
            nxt.sort(key=lambda s: (s[4], -s[3]))
            frontier = nxt[:self.config.beam_width]
        self.explored_choices += len(explored)

        out = []
        for changes, _key, usage, tp, ov in explored:
            if ov:
                continue
            assert all(x <= c for x, c in zip(usage, cap)), "choice exceeds capacity"
            moves = len(changes) - (job is not None)
            out.append(SchedulingChoice(virtual, changes, tp, moves))
        return out

    def best_perf(self, choices: list[SchedulingChoice],
                  virtual: Mapping[str, Option] | None = None) -> SchedulingChoice | None:
        if self.policy is Policy.CRIUS_DDL:
            choices = [c for c in choices
                       if all(self._meets_deadline(j, o) for j, o in c.changes)]
        if not choices:
            return None
        gain = self.config.min_move_gain
        return max(enumerate(choices),
                   key=lambda ic: (ic[1].estimated_cluster_throughput - gain * ic[1].moves,
                                   -ic[1].moves, -ic[0]))[1]

    def cell_based_sched(self, virtual: dict[str, Option], job: str | None) -> bool:
        if job is not None and not self._may_fit(virtual, job):
            return False
        best = self.best_perf(self.scale_resource(virtual, job, self.config.search_depth), virtual)
        self.decisions += 1
        if best is None:
            return False
        virtual.update(best.changes)
        return True

    def _may_fit(self, virtual: Mapping[str, Option], job: str) -> bool:
        """Cheap necessary condition for placing ``job`` within the search depth."""
        cap = self.state.capacity
        usage = _usage(virtual)
        depth = self.config.search_depth
        for o in self.admission_options(job):
            t = o.gpu_type
            free = cap[t] - usage.get(t, 0)
            gains = []
            for j, cur in virtual.items():
                if cur.gpu_type != t:
                    continue
                smallest = min((a.gpus for a in self.move_options(cur) if a.gpu_type == t),
                               default=cur.gpus)
                leaves = any(a.gpu_type != t for a in self.move_options(cur))
                gains.append(cur.gpus if leaves else cur.gpus - smallest)
            gains.sort(reverse=True)
            if free + sum(gains[:depth]) >= o.gpus:
                return True
        return False

    # ---- rounds -----------------------------------------------------------

    def _virtual(self) -> dict[str, Option]:
        return {j: a.option for j, a in self.state.running.items()}

    def _drop(self, job_id: str, reason: str):
        self.state.dropped[job_id] = (self._now, reason)
        if job_id in self.state.pending:
            self.state.pending.remove(job_id)
        log.info("t=%.0f drop %s: %s", self._now, job_id, reason)

    def _try_pending(self, virtual: dict[str, Option], job_id: str,
                     opp: set[str]) -> tuple[bool, list[str]]:
        """Attempt a pending job, suspending younger opportunistic jobs if that helps.

        Returns (placed, jobs left suspended).
        """
        order = self.state.jobs[job_id].order
        younger = sorted((j for j in virtual if j in opp and self.state.jobs[j].order > order),
                         key=lambda j: self.state.jobs[j].order)
        if not younger:
            return self.cell_based_sched(virtual, job_id), []
        saved = dict(virtual)
        for j in younger:
            del virtual[j]
        if not self.cell_based_sched(virtual, job_id):
            virtual.clear()
            virtual.update(saved)
            return False, []
        left = []
        for j in younger:
            # re-admit on whatever is still idle, keeping the Cell if it fits
            keep = saved[j]
            usage = _usage(virtual)
            if usage.get(keep.gpu_type, 0) + keep.gpus <= self.state.capacity[keep.gpu_type]:
                virtual[j] = keep
            elif not self.cell_based_sched(virtual, j):
                left.append(j)
        return True, left

    def _refresh_opportunistic(self, virtual: Mapping[str, Option]) -> set[str]:
        if not self.state.pending:
            return set()
        oldest = min(self.state.jobs[p].order for p in self.state.pending)
        out = set()
        for j in virtual:
            info = self.state.jobs[j]
            if self.policy is Policy.CRIUS_DDL and info.record.deadline is not None:
                continue
            if info.order > oldest:
                out.add(j)
        return out

    def _begin(self, now: float) -> float:
        self._now = now
        return time.perf_counter()

    def _end(self, t0: float):
        self.round_wall_times.append(time.perf_counter() - t0)
        self.state.check_capacity()

    def sched_arrival(self, now: float, new_jobs: Iterable[TraceRecord]) -> list[Action]:
        t0 = self._begin(now)
        if self.policy is Policy.FCFS:
            for job in new_jobs:
                self.register(job)
                if not self.admission_options(job.job_id):
                    self._drop(job.job_id, "no feasible Cell")
                else:
                    self.state.pending.append(job.job_id)
            acts = self._fcfs_round(now, "arrival")
            self._end(t0)
            return acts

        virtual = self._virtual()
        self._drop_hopeless()
        for job in new_jobs:
            info = self.register(job)
            if not info.options:
                self._drop(job.job_id, "no feasible Cell")
                continue
            if self.deadline_hopeless(job.job_id):
                self._drop(job.job_id, "deadline unmeetable")
                continue
            if not self.cell_based_sched(virtual, job.job_id):
                self.state.pending.append(job.job_id)
        acts = self.finalize_alloc(now, virtual, self._refresh_opportunistic(virtual), "arrival")
        self._end(t0)
        return acts

    def sched_departure(self, now: float, job_id: str) -> list[Action]:
        t0 = self._begin(now)
        alloc = self.state.running.pop(job_id)
        self.slots.release(job_id)
        self.state.finished[job_id] = now
        assert alloc.option.job_id == job_id
        if self.policy is Policy.FCFS:
            acts = self._fcfs_round(now, "departure")
            self._end(t0)
            return acts
        acts = self._crius_retry(now, "departure", extra_pass=True)
        self._end(t0)
        return acts

    def retry_pending(self, now: float, reason: str = "retry") -> list[Action]:
        t0 = self._begin(now)
        if self.policy is Policy.FCFS:
            acts = self._fcfs_round(now, reason)
        else:
            acts = self._crius_retry(now, reason, extra_pass=False)
        self._end(t0)
        return acts

    def drop_pending(self, now: float, reason: str):
        self._now = now
        for j in list(self.state.pending):
            self._drop(j, reason)

    def _drop_hopeless(self):
        for j in list(self.state.pending):
            if self.deadline_hopeless(j):
                self._drop(j, "deadline unmeetable")

    def _crius_retry(self, now: float, reason: str, extra_pass: bool) -> list[Action]:
        virtual = self._virtual()
        opp = self.state.opportunistic
        self._drop_hopeless()
        requeue: list[str] = []
        for j in list(self.state.pending):
            placed, left = self._try_pending(virtual, j, opp)
            if placed:
                self.state.pending.remove(j)
                opp -= set(left)
                requeue.extend(left)
        if requeue:
            self.state.pending.extend(requeue)
            self.state.pending.sort(key=lambda j: self.state.jobs[j].order)
        if extra_pass and not self.state.pending:
            self.cell_based_sched(virtual, None)
        return self.finalize_alloc(now, virtual, self._refresh_opportunistic(virtual), reason)

    def _fcfs_round(self, now: float, reason: str) -> list[Action]:
        virtual = self._virtual()
        free = dict(self.state.free)
        while self.state.pending:
            head = self.state.pending[0]
            info = self.state.jobs[head]
            opts = self.admission_options(head)
            pref = info.record.preferred_gpu_type
            opts = sorted(opts, key=lambda o: o.gpu_type != pref)  # stable: then cluster order
            pick = next((o for o in opts if o.gpus <= free[o.gpu_type]), None)
            if pick is None:
                break
            virtual[head] = pick
            free[pick.gpu_type] -= pick.gpus
            self.state.pending.pop(0)
            self.decisions += 1
        return self.finalize_alloc(now, virtual, set(), reason)

    def finalize_alloc(self, now: float, virtual: Mapping[str, Option],
                       opportunistic: set[str], reason: str) -> list[Action]:
        st = self.state
        acts: list[Action] = []
        penalty = self.config.restart_penalty
        order = sorted(set(st.running) | set(virtual), key=lambda j: st.jobs[j].order)
        changed = []
        for j in order:
            old = st.running.get(j)
            new = virtual.get(j)
            if old is not None and new is None:
                info = st.jobs[j]
                info.remaining = old.remaining_at(now)
                info.suspended = True
                del st.running[j]
                self.slots.release(j)
                if j not in st.pending:
                    st.pending.append(j)
                acts.append(Action(now, j, "suspend", None, 0, None, reason))
            elif old is not None and new is not None and old.option.slot != new.slot:
                self.slots.release(j)
                changed.append((j, old, new))
        st.pending.sort(key=lambda j: st.jobs[j].order)
        for j, old, new in changed:
            info = st.jobs[j]
            tuned = self.catalog.tune(new.cell)
            kind = "migrate" if old.option.gpu_type != new.gpu_type else "rescale"
            info.version += 1
            st.running[j] = Allocation(new, tuned, now + penalty, old.remaining_at(now),
                                       j in opportunistic, info.version)
            info.restarts += 1
            info.last_type = new.gpu_type
            self.slots.allocate(j, new.gpu_type, new.gpus)
            acts.append(Action(now, j, kind, new.gpu_type, new.gpus, tuned.plan.describe(), reason))
        for j in order:
            new = virtual.get(j)
            if new is None or j in st.running:
                if j in st.running:
                    st.running[j].opportunistic = j in opportunistic
                continue
            info = st.jobs[j]
            tuned = self.catalog.tune(new.cell)
            if info.started:
                kind, start, remaining = "resume", now + penalty, info.remaining
                info.restarts += 1
            else:
                kind, start, remaining = "start", now, info.record.iterations
                info.first_start = now
            info.started = True
            info.suspended = False
            info.remaining = None
            info.last_type = new.gpu_type
            info.version += 1
            st.running[j] = Allocation(new, tuned, start, remaining, j in opportunistic, info.version)
            if j in st.pending:
                st.pending.remove(j)
            self.slots.allocate(j, new.gpu_type, new.gpus)
            acts.append(Action(now, j, kind, new.gpu_type, new.gpus, tuned.plan.describe(),
                               "opportunistic" if j in opportunistic else reason))
        for t in st.capacity:
            assert self.slots.used(t) == st.capacity[t] - st.free[t], "slot bookkeeping drift"
        self.actions.extend(acts)
        return acts
