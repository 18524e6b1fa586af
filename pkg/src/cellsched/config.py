"""One-file TOML experiment description.

Top-level sections: ``seed``, ``output_dir``, ``[cluster]``, ``[costmodel]``,
``[scheduler]`` and ``[workload]``.  A config may set ``cluster_preset =
"default"`` instead of a ``[cluster]`` section to reuse the bundled inventory.
Unknown keys are rejected so typos surface at startup.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cluster import Cluster, ClusterError, load_cluster
from .costmodel import CostModelConfig
from .scheduler import CellCatalog, Policy, SchedulerConfig
from .workload import Family, TraceRecord, load_trace, nominal_iteration_latency, synthesize_trace


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    trace: str | None = None  # path; synthetic when absent
    format: str = "generic_json"
    job_count: int = 200
    arrival_per_hour: float = 30.0
    model_mix: Mapping[str, float] = field(
        default_factory=lambda: {"BERT": 1.0, "MoE": 1.0, "WideResNet": 1.0})
    sizes: Mapping[str, list[float]] | None = None  # billions of parameters per family
    gpu_count_choices: tuple[int, ...] = (1, 2, 4, 8)
    gpu_type_weights: Mapping[str, float] | None = None  # uniform over cluster types by default
    iterations_min: int = 100
    iterations_max: int = 5000
    lift_to_feasible: bool = True
    deadline_fraction: float = 0.0
    deadline_slack_min: float = 1.5
    deadline_slack_max: float = 4.0


@dataclass(frozen=True)
class MasterConfig:
    cluster: Cluster
    costs: CostModelConfig = CostModelConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    workload: WorkloadConfig = WorkloadConfig()
    output_dir: str = "out"
    seed: int = 0
    base_dir: Path = Path(".")


def _section(cls, data: Mapping[str, Any], where: str, convert: Mapping[str, Any] = {}):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    kwargs = {}
    for k, v in data.items():
        try:
            kwargs[k] = convert[k](v) if k in convert else v
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.{k}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def default_cluster_spec() -> dict:
    text = resources.files("cellsched").joinpath("data/default.toml").read_text()
    return tomllib.loads(text)["cluster"]


def parse_config(data: Mapping[str, Any], base_dir: Path = Path(".")) -> MasterConfig:
    allowed = {"seed", "output_dir", "cluster", "cluster_preset", "costmodel", "scheduler", "workload"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"top level: unknown field(s) {unknown}")
    if "cluster" in data and "cluster_preset" in data:
        raise ConfigError("cluster: give either [cluster] or cluster_preset, not both")
    preset = data.get("cluster_preset", "default" if "cluster" not in data else None)
    if preset is not None and preset != "default":
        raise ConfigError(f"cluster_preset: unknown preset {preset!r}")
    try:
        cluster = load_cluster(data["cluster"] if preset is None else default_cluster_spec())
    except ClusterError as exc:
        raise ConfigError(str(exc)) from None
    costs = _section(CostModelConfig, data.get("costmodel", {}), "costmodel")
    sched = _section(SchedulerConfig, data.get("scheduler", {}), "scheduler",
                     {"policy": Policy})
    wl = _section(WorkloadConfig, data.get("workload", {}), "workload",
                  {"gpu_count_choices": lambda v: tuple(int(x) for x in v)})
    for fam in wl.model_mix:
        try:
            Family.parse(fam)
        except ValueError as exc:
            raise ConfigError(f"workload.model_mix: {exc}") from None
    for t in (wl.gpu_type_weights or {}):
        if t not in cluster.gpu_types:
            raise ConfigError(f"workload.gpu_type_weights: unknown GPU type {t!r}")
    if wl.format not in ("generic_json", "philly_csv"):
        raise ConfigError(f"workload.format: unknown trace format {wl.format!r}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed: must be an integer")
    return MasterConfig(cluster, costs, sched, wl, str(data.get("output_dir", "out")), seed,
                        base_dir)


def load_config(path: "str | Path") -> MasterConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None  # message carries line and column
    return parse_config(data, path.parent)


def build_workload(cfg: MasterConfig, seed: int | None = None,
                   catalog: CellCatalog | None = None) -> list[TraceRecord]:
    """Load the configured trace, or synthesize one from ``seed`` (default: cfg.seed)."""
    seed = cfg.seed if seed is None else seed
    wl = cfg.workload
    if wl.trace:
        path = Path(wl.trace)
        if not path.is_absolute():
            path = cfg.base_dir / path
        return load_trace(path, wl.format, seed=cfg.seed,
                          bytes_per_param=cfg.costs.bytes_per_param)
    catalog = catalog or CellCatalog(cfg.cluster, cfg.costs, cfg.scheduler.max_plans)
    sizes = None
    if wl.sizes is not None:
        sizes = {Family.parse(k): tuple(float(x) for x in v) for k, v in wl.sizes.items()}
    types = wl.gpu_type_weights or {t: 1.0 for t in cfg.cluster.gpu_types}

    def min_gpus(model):
        return catalog.min_feasible_gpus(TraceRecord("probe", 0.0, 1, model, 1))

    def best_latency(model, g):
        # deadlines scale with the job's fastest tuned Cell at its requested size
        cells = catalog.best_cells(TraceRecord("probe", 0.0, 1, model, g))
        at = [c for c in cells if c[1] == g] or cells
        if not at:
            return nominal_iteration_latency(model, g)
        cell = max(at, key=lambda c: c[3].throughput)[2]
        return catalog.tune(cell).iteration_latency

    return synthesize_trace(
        seed, wl.job_count, wl.arrival_per_hour, wl.model_mix, wl.gpu_count_choices, types,
        size_choices=sizes, iterations_range=(wl.iterations_min, wl.iterations_max),
        bytes_per_param=cfg.costs.bytes_per_param,
        min_gpus=min_gpus if wl.lift_to_feasible else None,
        deadline_fraction=wl.deadline_fraction,
        deadline_slack=(wl.deadline_slack_min, wl.deadline_slack_max),
        latency_fn=best_latency)
