"""Parallelism tuning inside a scheduled Cell, pruned by the estimate's stage favors."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .cell import Cell, is_pow2
from .cluster import InterconnectProfile, NodeGroup
from .costmodel import DEFAULT_COSTS, CostModelConfig, StageParallelism
from .estimator import (CellEstimate, Favor, ParallelismPlan, PlanEstimate, estimate_plan,
                        evaluate_grid)


@dataclass(frozen=True)
class StageSpace:
    candidates: tuple[StageParallelism, ...]  # dp-only first, tp-only last

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class TunedPlan:
    plan: ParallelismPlan
    iteration_latency: float
    evaluated_count: int
    per_stage_memory: tuple[float, ...] = ()

    def throughput(self, global_batch_size: int) -> float:
        return global_batch_size / self.iteration_latency


def stage_search_space(g: int) -> StageSpace:
    if not is_pow2(g):
        raise ValueError(f"stage GPU count must be a power of two, got {g}")
    out, dp = [], g
    while dp >= 1:
        out.append(StageParallelism(dp, g // dp))
        dp //= 2
    return StageSpace(tuple(out))


def split_degree(g: int) -> int:
    """Smallest degree kept on the favored side; equals sqrt(g) for square g."""
    return 1 << ((g.bit_length() - 1) // 2)


def prune_space(space: StageSpace, favor: Favor | str) -> StageSpace:
    favor = Favor(favor)
    g = space.candidates[0].gpus
    cut = split_degree(g)
    if favor is Favor.DATA:
        keep = [c for c in space.candidates if c.dp >= cut]
    else:
        keep = [c for c in space.candidates if c.tp >= cut]
    return StageSpace(tuple(keep))


def _search(cell: Cell, spaces: list[StageSpace], group: NodeGroup,
            profile: InterconnectProfile, cfg: CostModelConfig) -> tuple[PlanEstimate | None, int]:
    grid = evaluate_grid(cell, [s.candidates for s in spaces], group, profile, cfg)
    best = grid.best_index()
    if best is None:
        return None, grid.size
    return estimate_plan(cell, grid.plan(best), group, profile, cfg), grid.size


def pruned_spaces(cell: Cell, estimate: CellEstimate) -> list[StageSpace]:
    return [prune_space(stage_search_space(st.assigned_gpus), f)
            for st, f in zip(cell.stages, estimate.stage_favor)]


def tune(cell: Cell, estimate: CellEstimate, group: NodeGroup, profile: InterconnectProfile,
         cfg: CostModelConfig = DEFAULT_COSTS) -> TunedPlan:
    if estimate.cell.key != cell.key:
        raise ValueError("estimate does not belong to this Cell")
    found, count = _search(cell, pruned_spaces(cell, estimate), group, profile, cfg)
    if found is None:
        found = estimate.best
    return TunedPlan(found.plan, found.iteration_latency, count, found.per_stage_memory)


def tune_unpruned(cell: Cell, group: NodeGroup, profile: InterconnectProfile,
                  cfg: CostModelConfig = DEFAULT_COSTS) -> TunedPlan | None:
    """Exhaustive search over every stage's full (dp, tp) axis."""
    spaces = [stage_search_space(st.assigned_gpus) for st in cell.stages]
    found, count = _search(cell, spaces, group, profile, cfg)
    if found is None:
        return None
    return TunedPlan(found.plan, found.iteration_latency, count, found.per_stage_memory)


def pruned_plan_dump(cell: Cell, estimate: CellEstimate, group: NodeGroup,
                     profile: InterconnectProfile,
                     cfg: CostModelConfig = DEFAULT_COSTS) -> list[PlanEstimate]:
    spaces = pruned_spaces(cell, estimate)
    return [estimate_plan(cell, ParallelismPlan(tuple(c)), group, profile, cfg)
            for c in itertools.product(*(s.candidates for s in spaces))]
