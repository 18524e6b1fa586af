"""Command-line front end: partition, estimate, tune and simulate."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .cell import Cell, determine_stages, random_cell
from .cluster import Cluster
from .config import ConfigError, MasterConfig, build_workload, load_config, parse_config
from .estimator import InfeasibleCell, all_plan_estimates, estimate_cell
from .scheduler import CellCatalog, Policy
from .simulator import run, write_outputs
from .tuner import pruned_plan_dump, tune, tune_unpruned
from .workload import Family, ModelSpec, OperatorSpec, build_model

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 2, 3

log = logging.getLogger("cellsched")


class UsageError(Exception):
    pass


def _emit(obj):
    print(json.dumps(obj, indent=2))


def _config(path: str | None) -> MasterConfig:
    return load_config(path) if path else parse_config({})


def _model(args) -> ModelSpec:
    if args.model_json:
        data = json.loads(Path(args.model_json).read_text())
        ops = tuple(OperatorSpec(i, float(o["flops"]), int(o.get("param_bytes", 0)),
                                 float(o.get("activation_bytes", 0.0)), float(o.get("boundary_bytes", 0.0)))
                    for i, o in enumerate(data["operators"]))
        total = sum(o.param_bytes for o in ops)
        return ModelSpec(data.get("name", "custom"), Family.SYNTHETIC, ops, total / 2,
                         int(data.get("global_batch", args.gbs)))
    return build_model(args.family, args.params, args.gbs)


def _cell(args, cluster: Cluster) -> Cell:
    model = _model(args)
    gpu_type = args.gpu_type or cluster.gpu_types[0]
    group = cluster.group(gpu_type)
    if args.gpus > group.capacity:
        raise UsageError(f"{gpu_type} has only {group.capacity} GPUs")
    return Cell("cli", gpu_type, args.gpus, determine_stages(model, args.gpus, args.stages), model)


def cmd_partition(args) -> int:
    model = _model(args)
    part = determine_stages(model, args.gpus, args.stages)
    _emit({"model": model.name, "gpus": args.gpus, **part.to_dict()})
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _config(args.config)
    cell = _cell(args, cfg.cluster)
    group = cfg.cluster.group(cell.gpu_type)
    prof = cfg.cluster.interconnects
    try:
        est = estimate_cell(cell, group, prof, cfg.costs)
    except InfeasibleCell as exc:
        if args.dump_plans:
            _emit({"cell": cell.to_dict(), "plans": [_row(p, False) for p in
                                                     all_plan_estimates(cell, group, prof, cfg.costs)]})
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = {"cell": cell.to_dict(), "best_plan": est.best.plan.describe(),
           "iteration_latency_s": est.iteration_latency, "throughput": est.throughput,
           "stage_favor": [f.value for f in est.stage_favor],
           "plans_evaluated": est.plans_evaluated, "stage_evaluations": est.stage_evaluations}
    if args.dump_plans:
        out["plans"] = [_row(p, p.plan == est.best.plan)
                        for p in all_plan_estimates(cell, group, prof, cfg.costs)]
    _emit(out)
    return EXIT_OK


def _row(p, best: bool) -> dict:
    return {**p.to_dict(), "status": "feasible" if p.feasible else "infeasible", "best": best}


def cmd_tune(args) -> int:
    cfg = _config(args.config)
    if args.batch:
        return _tune_batch(args, cfg)
    cell = _cell(args, cfg.cluster)
    group = cfg.cluster.group(cell.gpu_type)
    prof = cfg.cluster.interconnects
    try:
        est = estimate_cell(cell, group, prof, cfg.costs)
    except InfeasibleCell as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    tuned = tune(cell, est, group, prof, cfg.costs)
    out = {"cell": cell.to_dict(), "plan": tuned.plan.describe(),
           "iteration_latency_s": tuned.iteration_latency, "evaluated_count": tuned.evaluated_count,
           "estimate_latency_s": est.iteration_latency}
    if args.unpruned:
        full = tune_unpruned(cell, group, prof, cfg.costs)
        out["unpruned"] = {"plan": full.plan.describe(), "iteration_latency_s": full.iteration_latency,
                           "evaluated_count": full.evaluated_count}
        out["tuning_accuracy"] = full.iteration_latency / tuned.iteration_latency
    if args.dump_pruned:
        out["pruned_plans"] = [p.to_dict() for p in pruned_plan_dump(cell, est, group, prof, cfg.costs)]
    _emit(out)
    return EXIT_OK


def _tune_batch(args, cfg: MasterConfig) -> int:
    rng = np.random.default_rng(args.seed)
    prof = cfg.cluster.interconnects
    acc, ratio, rows = [], [], []
    while len(rows) < args.batch:
        cell = random_cell(rng, cfg.cluster, max_stages=4, max_gpus=16)
        group = cfg.cluster.group(cell.gpu_type)
        try:
            est = estimate_cell(cell, group, prof, cfg.costs)
        except InfeasibleCell:
            continue
        tuned = tune(cell, est, group, prof, cfg.costs)
        full = tune_unpruned(cell, group, prof, cfg.costs)
        a = full.iteration_latency / tuned.iteration_latency
        acc.append(a)
        ratio.append(tuned.evaluated_count / full.evaluated_count)
        rows.append({"model": cell.model.name, "gpu_type": cell.gpu_type, "gpus": cell.total_gpus,
                     "stages": cell.n_stages, "accuracy": a,
                     "pruned_count": tuned.evaluated_count, "unpruned_count": full.evaluated_count})
    _emit({"cells": len(rows), "mean_accuracy": float(np.mean(acc)),
           "min_accuracy": float(np.min(acc)),
           "evaluated_ratio": sum(r["pruned_count"] for r in rows) / sum(r["unpruned_count"] for r in rows),
           "mean_evaluated_ratio": float(np.mean(ratio)),
           "rows": rows if args.verbose else None})
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    sched = cfg.scheduler
    if args.policy:
        sched = dataclasses.replace(sched, policy=Policy(args.policy))
    if args.depth is not None:
        if args.depth < 1:
            raise UsageError("--depth must be >= 1")
        sched = dataclasses.replace(sched, search_depth=args.depth)
    seed = cfg.seed if args.seed is None else args.seed
    catalog = CellCatalog(cfg.cluster, cfg.costs, sched.max_plans)
    trace = build_workload(cfg, seed, catalog)
    catalog.prewarm(trace, args.jobs or os.cpu_count() or 1)
    result = run(trace, cfg.cluster, sched, seed, catalog)
    out = Path(args.out or cfg.output_dir)
    if not out.is_absolute() and not args.out:
        out = cfg.base_dir / out
    write_outputs(result, out)
    s = result.metrics.summary()
    print(json.dumps({"policy": sched.policy.value, "jobs": len(trace), "out": str(out),
                      **{k: s[k] for k in ("avg_jct", "avg_queuing_time", "avg_throughput",
                                           "finished_job_count", "dropped_job_count",
                                           "mean_restarts")}}, indent=2))
    return EXIT_OK


def _cell_args(p: argparse.ArgumentParser, stages_default: int | None = None):
    p.add_argument("--family", default="Synthetic", help="WideResNet, BERT, MoE or Synthetic")
    p.add_argument("--params", type=float, default=1e9, help="parameter count, e.g. 2.6e9")
    p.add_argument("--gbs", type=int, default=256, help="global batch size")
    p.add_argument("--model-json", help="custom operator chain (JSON with an 'operators' list)")
    p.add_argument("--gpus", type=int, default=8)
    p.add_argument("--stages", type=int, default=stages_default or 2)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cellsched", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="split a model into pipeline stages")
    _cell_args(p, 4)
    p.set_defaults(func=cmd_partition)

    for name, func, helptext in (("estimate", cmd_estimate, "estimate a Cell"),
                                 ("tune", cmd_tune, "tune parallelism inside a Cell")):
        p = sub.add_parser(name, help=helptext)
        _cell_args(p)
        p.add_argument("-c", "--config", help="TOML config (default: bundled cluster)")
        p.add_argument("--gpu-type", help="GPU type (default: first in the cluster)")
        if name == "estimate":
            p.add_argument("--dump-plans", action="store_true", help="print every assembled plan")
        else:
            p.add_argument("--unpruned", action="store_true", help="also search the full space")
            p.add_argument("--dump-pruned", action="store_true", help="print every pruned plan")
            p.add_argument("--batch", type=int, default=0, help="tune N seeded random cells")
            p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("simulate", help="replay a trace under a policy")
    p.add_argument("-c", "--config", help="TOML config")
    p.add_argument("--policy", choices=[x.value for x in Policy])
    p.add_argument("--seed", type=int, help="seed for synthesized traces")
    p.add_argument("--depth", type=int, help="search depth override")
    p.add_argument("--jobs", type=int, help="workers for Cell estimation (default: all cores)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleCell as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
