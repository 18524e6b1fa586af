"""Analytic per-stage compute, memory and communication costs.

Stands in for runtime profiling: compute is FLOPs over effective device
throughput, communication goes through the interpolated link tables, and the
pipeline latency accumulates the per-microbatch stage totals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .cell import Stage, is_pow2
from .cluster import GpuSpec, InterconnectProfile, NodeGroup, comm_latency


@dataclass(frozen=True)
class CostModelConfig:
    tp_alpha: float = 0.85
    k_state: float = 8.0
    k_tp_msgs: float = 2.0
    bytes_per_param: int = 2
    microbatch_factor: int = 4


DEFAULT_COSTS = CostModelConfig()


@dataclass(frozen=True, order=True)
class StageParallelism:
    dp: int
    tp: int

    def __post_init__(self):
        if not (is_pow2(self.dp) and is_pow2(self.tp)):
            raise ValueError(f"dp and tp must be powers of two >= 1, got ({self.dp}, {self.tp})")

    @property
    def gpus(self) -> int:
        return self.dp * self.tp


@dataclass(frozen=True)
class StageCost:
    compute_per_microbatch: float
    intra_comm_per_microbatch: float
    inbound_comm_per_microbatch: float
    dp_grad_sync_per_iteration: float
    memory_per_device: float


@dataclass(frozen=True)
class PipelineConfig:
    n_microbatches: int
    microbatch_size: float

    @classmethod
    def for_stage(cls, n_stages: int, global_batch: int, dp: int,
                  cfg: CostModelConfig = DEFAULT_COSTS) -> "PipelineConfig":
        b = cfg.microbatch_factor * n_stages
        return cls(b, global_batch / (dp * b))


@dataclass(frozen=True)
class StagePlacement:
    """Link classes seen by one stage when its GPUs are laid out node by node."""

    gpus_per_node: int
    intra_link: str
    inter_link: str
    fits_one_node: bool
    inbound_intra: bool

    def tp_link(self, tp: int) -> str:
        return self.intra_link if tp <= self.gpus_per_node else self.inter_link

    @property
    def dp_link(self) -> str:
        return self.intra_link if self.fits_one_node else self.inter_link

    @property
    def inbound_link(self) -> str:
        return self.intra_link if self.inbound_intra else self.inter_link


def stage_placements(stages: Sequence[Stage], group: NodeGroup) -> list[StagePlacement]:
    gpn = group.gpus_per_node
    out, offset, prev_node = [], 0, None
    for st in stages:
        first, last = offset // gpn, (offset + st.assigned_gpus - 1) // gpn
        fits = first == last
        out.append(StagePlacement(gpn, group.intra_node_link, group.inter_node_link,
                                  fits, fits and prev_node == first))
        prev_node = first if fits else None
        offset += st.assigned_gpus
    return out


def tp_efficiency(tp: int, alpha: float = DEFAULT_COSTS.tp_alpha) -> float:
    return alpha ** math.log2(tp)


def stage_compute_latency(stage: Stage, par: StageParallelism, gpu: GpuSpec,
                          microbatch_size: float, cfg: CostModelConfig = DEFAULT_COSTS) -> float:
    # dp is absent on purpose: it already shrank microbatch_size upstream
    speed = par.tp * gpu.peak_flops * gpu.compute_efficiency * tp_efficiency(par.tp, cfg.tp_alpha)
    return stage.flops_per_sample * microbatch_size / speed


def stage_memory(stage: Stage, par: StageParallelism, microbatch_size: float, in_flight: int,
                 cfg: CostModelConfig = DEFAULT_COSTS) -> float:
    if in_flight < 1:
        raise ValueError("in_flight must be >= 1")
    states = stage.param_bytes * cfg.k_state / par.tp
    acts = stage.activation_bytes_per_sample * microbatch_size * in_flight / par.tp
    return states + acts


def stage_comm_costs(stage: Stage, par: StageParallelism, prev_par: StageParallelism | None,
                     placement: StagePlacement, profile: InterconnectProfile,
                     microbatch_size: float, cfg: CostModelConfig = DEFAULT_COSTS
                     ) -> tuple[float, float, float]:
    """(intra-stage per microbatch, inbound per microbatch, gradient sync per iteration)."""
    intra = 0.0
    if par.tp > 1:
        vol = stage.activation_bytes_per_sample * microbatch_size * cfg.k_tp_msgs
        intra = comm_latency(profile, placement.tp_link(par.tp), "all_reduce", vol, par.tp)

    inbound = 0.0
    if prev_par is not None:
        vol = stage.inbound_boundary_bytes_per_sample * microbatch_size
        inbound = comm_latency(profile, placement.inbound_link, "send_recv", vol, 2)
        tp = par.tp if par.tp > 1 else prev_par.tp
        if tp > 1:
            inbound += comm_latency(profile, placement.tp_link(tp), "all_gather", vol, tp)

    sync = 0.0
    if par.dp > 1:
        # each tp rank syncs its own shard; the tp shards sync side by side
        sync = comm_latency(profile, placement.dp_link, "all_reduce",
                            stage.param_bytes / par.tp, par.dp)
    return intra, inbound, sync


def stage_cost(stage: Stage, par: StageParallelism, prev_par: StageParallelism | None,
               gpu: GpuSpec, placement: StagePlacement, profile: InterconnectProfile,
               microbatch_size: float, in_flight: int,
               cfg: CostModelConfig = DEFAULT_COSTS) -> StageCost:
    intra, inbound, sync = stage_comm_costs(stage, par, prev_par, placement, profile,
                                            microbatch_size, cfg)
    return StageCost(stage_compute_latency(stage, par, gpu, microbatch_size, cfg),
                     intra, inbound, sync,
                     stage_memory(stage, par, microbatch_size, in_flight, cfg))


def pipeline_iteration_latency(stage_latencies: Sequence[float], inbound_comms: Sequence[float],
                               dp_sync_total: float, n_microbatches: int) -> float:
    """First microbatch through every stage, then B-1 steady-state steps.

    A steady-state step is bounded by the stage whose latency remains largest
    once its inbound communication (overlapped with the previous microbatch's
    compute) is taken out.
    """
    if n_microbatches < 1:
        raise ValueError("n_microbatches must be >= 1")
    if not stage_latencies:
        raise ValueError("need at least one stage")
    total = 0.0
    steady = -math.inf
    for t, c in zip(stage_latencies, inbound_comms, strict=True):
        total = total + t
        steady = max(steady, t - c)
    return total + (n_microbatches - 1) * steady + dp_sync_total


def slowest_stage(stage_latencies: Sequence[float], inbound_comms: Sequence[float]) -> int:
    return max(range(len(stage_latencies)),
               key=lambda i: (stage_latencies[i] - inbound_comms[i], -i))
