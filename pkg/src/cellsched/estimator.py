"""Agile Cell estimation by parallelism assembly.

Each stage is costed once under its data-parallel-only and tensor-parallel-only
layouts; the 2^N_S assembled plans reuse those costs plus the boundary
communication between neighbouring choices.  The best feasible assembled plan
is the Cell's estimate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .cell import Cell
from .cluster import InterconnectProfile, NodeGroup
from .costmodel import (DEFAULT_COSTS, CostModelConfig, StageParallelism,
                        pipeline_iteration_latency, stage_comm_costs,
                        stage_compute_latency, stage_memory, stage_placements)


class Favor(str, Enum):
    DATA = "DataParallel"
    TENSOR = "TensorParallel"


class InfeasibleCell(Exception):
    """No assembled plan of the Cell fits in device memory."""


@dataclass(frozen=True)
class ParallelismPlan:
    per_stage: tuple[StageParallelism, ...]

    def describe(self) -> list[list[int]]:
        return [[p.dp, p.tp] for p in self.per_stage]

    @property
    def total_tp(self) -> int:
        return sum(p.tp for p in self.per_stage)


@dataclass(frozen=True)
class PlanEstimate:
    plan: ParallelismPlan
    iteration_latency: float
    per_stage_memory: tuple[float, ...]
    feasible: bool

    def to_dict(self) -> dict:
        return {"plan": self.plan.describe(), "iteration_latency_s": self.iteration_latency,
                "per_stage_memory_bytes": list(self.per_stage_memory), "feasible": self.feasible}


@dataclass(frozen=True)
class CellEstimate:
    cell: Cell
    best: PlanEstimate
    stage_favor: tuple[Favor, ...]
    throughput: float
    plans_evaluated: int
    stage_evaluations: int

    @property
    def iteration_latency(self) -> float:
        return self.best.iteration_latency


def pure_choices(g: int) -> list[StageParallelism]:
    if g == 1:
        return [StageParallelism(1, 1)]
    return [StageParallelism(g, 1), StageParallelism(1, g)]


def assemble_plans(cell: Cell) -> list[ParallelismPlan]:
    spaces = [pure_choices(st.assigned_gpus) for st in cell.stages]
    return [ParallelismPlan(tuple(c)) for c in itertools.product(*spaces)]


def _check(cell: Cell, plan: ParallelismPlan):
    if len(plan.per_stage) != cell.n_stages:
        raise ValueError("plan length does not match the Cell's stage count")
    for st, par in zip(cell.stages, plan.per_stage):
        if par.gpus != st.assigned_gpus:
            raise ValueError(f"stage with {st.assigned_gpus} GPUs cannot take {par}")


def estimate_plan(cell: Cell, plan: ParallelismPlan, group: NodeGroup,
                  profile: InterconnectProfile, cfg: CostModelConfig = DEFAULT_COSTS) -> PlanEstimate:
    _check(cell, plan)
    gpu = group.gpu
    n_s = cell.n_stages
    b = cfg.microbatch_factor * n_s
    gbs = cell.model.global_batch_size
    places = stage_placements(cell.stages, group)
    totals, inbounds, syncs, mems = [], [], [], []
    feasible = True
    prev = None
    for st, par, place in zip(cell.stages, plan.per_stage, places):
        mbs = gbs / (par.dp * b)
        comp = stage_compute_latency(st, par, gpu, mbs, cfg)
        intra, inbound, sync = stage_comm_costs(st, par, prev, place, profile, mbs, cfg)
        mem = stage_memory(st, par, mbs, n_s, cfg)
        totals.append(comp + intra + inbound)
        inbounds.append(inbound)
        syncs.append(sync)
        mems.append(mem)
        feasible = feasible and mbs >= 1 and mem <= gpu.memory
        prev = par
    lat = pipeline_iteration_latency(totals, inbounds, max(syncs), b)
    return PlanEstimate(plan, lat, tuple(mems), feasible)


@dataclass
class PlanGrid:
    """Latency and feasibility of every plan in a per-stage candidate product.

    Plans are indexed in ``itertools.product`` order over ``candidates``.
    """

    candidates: list[list[StageParallelism]]
    latency: np.ndarray
    feasible: np.ndarray
    total_tp: np.ndarray
    stage_evaluations: int

    @property
    def size(self) -> int:
        return int(self.latency.shape[0])

    def plan(self, index: int) -> ParallelismPlan:
        shape = [len(c) for c in self.candidates]
        pos = np.unravel_index(index, shape)
        return ParallelismPlan(tuple(c[int(k)] for c, k in zip(self.candidates, pos)))

    def best_index(self) -> int | None:
        ok = np.flatnonzero(self.feasible)
        if ok.size == 0:
            return None
        order = np.lexsort((ok, self.total_tp[ok], self.latency[ok]))
        return int(ok[order[0]])


def evaluate_grid(cell: Cell, candidates: Sequence[Sequence[StageParallelism]], group: NodeGroup,
                  profile: InterconnectProfile, cfg: CostModelConfig = DEFAULT_COSTS) -> PlanGrid:
    """Vectorized twin of :func:`estimate_plan` over a product of stage choices.

    Floating-point operations run in the same order as the scalar path, so
    every latency here equals ``estimate_plan`` on the same plan bit for bit.
    """
    cands = [list(c) for c in candidates]
    if len(cands) != cell.n_stages:
        raise ValueError("need one candidate list per stage")
    gpu = group.gpu
    n_s = cell.n_stages
    b = cfg.microbatch_factor * n_s
    gbs = cell.model.global_batch_size
    places = stage_placements(cell.stages, group)
    shape = [len(c) for c in cands]
    size = int(np.prod(shape))
    idx = [a.ravel() for a in np.indices(shape)] if n_s else []

    total = np.zeros(size)
    steady = None
    sync_max = None
    feasible = np.ones(size, dtype=bool)
    total_tp = np.zeros(size, dtype=np.int64)
    evals = 0
    for i, (st, place) in enumerate(zip(cell.stages, places)):
        k = len(cands[i])
        busy = np.empty(k)
        sync = np.empty(k)
        ok = np.empty(k, dtype=bool)
        tps = np.array([p.tp for p in cands[i]], dtype=np.int64)
        prev_list = cands[i - 1] if i else [None]
        inbound = np.empty((len(prev_list), k))
        for a, par in enumerate(cands[i]):
            mbs = gbs / (par.dp * b)
            comp = stage_compute_latency(st, par, gpu, mbs, cfg)
            mem = stage_memory(st, par, mbs, n_s, cfg)
            evals += 1
            ok[a] = mbs >= 1 and mem <= gpu.memory
            for pi, prev in enumerate(prev_list):
                intra, inb, s = stage_comm_costs(st, par, prev, place, profile, mbs, cfg)
                inbound[pi, a] = inb
            busy[a] = comp + intra
            sync[a] = s
        cur = idx[i]
        inb = inbound[idx[i - 1], cur] if i else inbound[0, cur]
        t = busy[cur] + inb
        total = total + t
        step = t - inb
        steady = step if steady is None else np.maximum(steady, step)
        s_cur = sync[cur]
        sync_max = s_cur if sync_max is None else np.maximum(sync_max, s_cur)
        feasible &= ok[cur]
        total_tp += tps[cur]
    latency = total + (b - 1) * steady + sync_max
    return PlanGrid(cands, latency, feasible, total_tp, evals)


def favor_of(par: StageParallelism) -> Favor:
    # a single-GPU stage is both; label it data-parallel
    return Favor.TENSOR if par.tp > 1 and par.dp == 1 else Favor.DATA


def estimate_cell(cell: Cell, group: NodeGroup, profile: InterconnectProfile,
                  cfg: CostModelConfig = DEFAULT_COSTS) -> CellEstimate:
    grid = evaluate_grid(cell, [pure_choices(st.assigned_gpus) for st in cell.stages],
                         group, profile, cfg)
    best = grid.best_index()
    if best is None:
        raise InfeasibleCell(f"{cell.job_id}: no assembled plan fits {cell.gpu_type} memory "
                             f"({cell.total_gpus} GPUs, {cell.n_stages} stages)")
    plan = grid.plan(best)
    est = estimate_plan(cell, plan, group, profile, cfg)
    return CellEstimate(cell, est, tuple(favor_of(p) for p in plan.per_stage),
                        cell.model.global_batch_size / est.iteration_latency,
                        grid.size, grid.stage_evaluations)


def all_plan_estimates(cell: Cell, group: NodeGroup, profile: InterconnectProfile,
                       cfg: CostModelConfig = DEFAULT_COSTS) -> list[PlanEstimate]:
    return [estimate_plan(cell, p, group, profile, cfg) for p in assemble_plans(cell)]
