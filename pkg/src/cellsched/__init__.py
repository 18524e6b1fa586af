"""Cell-based scheduling of adaptive-parallelism training jobs on heterogeneous GPUs."""

from .cell import Cell, Stage, StagePartition, determine_stages, generate_cells
from .cluster import Cluster, GpuSpec, InterconnectProfile, NodeGroup, load_cluster
from .costmodel import CostModelConfig, StageParallelism, pipeline_iteration_latency
from .estimator import (CellEstimate, InfeasibleCell, ParallelismPlan, PlanEstimate,
                        assemble_plans, estimate_cell, estimate_plan)
from .scheduler import CellCatalog, Policy, Scheduler, SchedulerConfig
from .simulator import Metrics, SimResult, run
from .tuner import TunedPlan, prune_space, stage_search_space, tune
from .workload import Family, ModelSpec, OperatorSpec, TraceRecord, build_model, load_trace, synthesize_trace

__version__ = "0.1.0"

__all__ = [
    "Cell", "CellCatalog", "CellEstimate", "Cluster", "CostModelConfig", "Family", "GpuSpec",
    "InfeasibleCell", "InterconnectProfile", "Metrics", "ModelSpec", "NodeGroup", "OperatorSpec",
    "ParallelismPlan", "PlanEstimate", "Policy", "Scheduler", "SchedulerConfig", "SimResult",
    "Stage", "StageParallelism", "StagePartition", "TraceRecord", "TunedPlan", "assemble_plans",
    "build_model", "determine_stages", "estimate_cell", "estimate_plan", "generate_cells",
    "load_cluster", "load_trace", "pipeline_iteration_latency", "prune_space", "run",
    "stage_search_space", "synthesize_trace", "tune",
]
