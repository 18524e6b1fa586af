"""End-to-end acceptance checks; each records a PASS/FAIL line in the session summary."""

import itertools
import random
import time

import numpy as np

from conftest import ACCEPTANCE
from oracles import brute_force_estimate, gpipe_event_sim
from cellsched.cell import determine_stages, random_cell
from cellsched.config import build_workload
from cellsched.costmodel import pipeline_iteration_latency
from cellsched.estimator import InfeasibleCell, estimate_cell
from cellsched.scheduler import CellCatalog
from cellsched.simulator import run, write_outputs
from cellsched.tuner import tune, tune_unpruned
from cellsched.workload import DEFAULT_TEMPLATES, Family, TABLE_SIZES, build_model

# pinned thresholds
C1_MIN_FEASIBLE, C1_BUDGET_S = 1000, 60.0
C2_MIN_CASES, C2_BUDGET_S = 500, 60.0
C3_CELLS, C3_MIN_ACCURACY, C3_MAX_COUNT_RATIO, C3_BUDGET_S = 100, 0.95, 0.60, 300.0
C4_MAX_JCT_RATIO, C4_MIN_TP_RATIO, C4_MAX_QUEUE_RATIO, C4_BUDGET_S = 0.80, 1.10, 0.70, 300.0
C7_JCT_SLACK, C7_MAX_ROUND_S = 1.02, 10.0
C9_TRIPLES = 1000


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}")
    return ok


def test_c1_estimator_matches_brute_force(default_cfg):
    rng = np.random.default_rng(101)
    cluster, costs = default_cfg.cluster, default_cfg.costs
    prof = cluster.interconnects
    feasible = infeasible = mismatches = 0
    t0 = time.perf_counter()
    while feasible < C1_MIN_FEASIBLE:
        cell = random_cell(rng, cluster, max_stages=5, max_gpus=32)
        group = cluster.group(cell.gpu_type)
        want = brute_force_estimate(cell, group, prof, costs)
        try:
            got = estimate_cell(cell, group, prof, costs)
        except InfeasibleCell:
            infeasible += 1
            mismatches += want is not None
            continue
        feasible += 1
        plan = tuple((p.dp, p.tp) for p in got.best.plan.per_stage)
        if want is None or (plan, got.iteration_latency, got.plans_evaluated) != want:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < C1_BUDGET_S
    record(1, ok, f"{feasible} feasible + {infeasible} infeasible cells, {mismatches} mismatches, "
                  f"{elapsed:.1f}s")
    assert ok


def test_c2_pipeline_formula_vs_event_sim():
    rnd = random.Random(202)
    dominant = checked = worst_gap = 0
    t0 = time.perf_counter()
    while dominant < C2_MIN_CASES:
        s = rnd.randint(1, 6)
        # multiples of 2^-20 s keep every sum exact, so equality is meaningful
        tick = lambda lo, hi: rnd.randint(lo, hi) / 2**20
        busy = [tick(1, 2**20) for _ in range(s)]
        inbound = [0.0] + [tick(0, 2**19) for _ in range(s - 1)]
        b = 4 * s
        sync = rnd.choice([0.0, tick(0, 2**18)])
        lat = [x + c for x, c in zip(busy, inbound)]
        formula = pipeline_iteration_latency(lat, inbound, sync, b)
        oracle = gpipe_event_sim(busy, inbound, b, sync)
        slow = max(range(s), key=lambda i: busy[i])
        checked += 1
        # the slowest device never waits once it has started
        if all(busy[slow] >= lat[i] for i in range(s) if i != slow):
            dominant += 1
            assert formula == oracle, (busy, inbound, formula, oracle)
        else:
            largest_inbound = max((c for i, c in enumerate(inbound) if i != slow), default=0.0)
            gap = oracle - formula
            worst_gap = max(worst_gap, gap)
            assert gap <= largest_inbound
    elapsed = time.perf_counter() - t0
    ok = elapsed < C2_BUDGET_S
    record(2, ok, f"{dominant} dominant cases exact, {checked - dominant} others with max "
                  f"underestimate {worst_gap:.3g}s, {elapsed:.1f}s")
    assert ok


def test_c3_tuning_accuracy(default_cfg):
    rng = np.random.default_rng(303)
    cluster, costs = default_cfg.cluster, default_cfg.costs
    prof = cluster.interconnects
    acc, pruned, full = [], [], []
    t0 = time.perf_counter()
    while len(acc) < C3_CELLS:
        cell = random_cell(rng, cluster, max_stages=4, max_gpus=16)
        group = cluster.group(cell.gpu_type)
        try:
            est = estimate_cell(cell, group, prof, costs)
        except InfeasibleCell:
            continue
        t = tune(cell, est, group, prof, costs)
        u = tune_unpruned(cell, group, prof, costs)
        acc.append(u.iteration_latency / t.iteration_latency)  # throughput ratio
        pruned.append(t.evaluated_count)
        full.append(u.evaluated_count)
    elapsed = time.perf_counter() - t0
    mean_acc = float(np.mean(acc))
    ratio = sum(pruned) / sum(full)
    per_cell = float(np.mean(np.divide(pruned, full)))
    ok = mean_acc >= C3_MIN_ACCURACY and ratio <= C3_MAX_COUNT_RATIO and elapsed < C3_BUDGET_S
    record(3, ok, f"mean accuracy {mean_acc:.4f} over {len(acc)} cells, evaluated "
                  f"{sum(pruned)}/{sum(full)} = {ratio:.3f} (per-cell mean {per_cell:.3f}), "
                  f"{elapsed:.1f}s")
    assert all(a <= 1.0 for a in acc)  # unpruned is never worse
    assert ok


def test_c4_crius_beats_fcfs(sims):
    t0 = time.perf_counter()
    fcfs = sims.get("fcfs").metrics
    crius = sims.get("crius").metrics
    elapsed = time.perf_counter() - t0
    jct = crius.avg_jct / fcfs.avg_jct
    tp = crius.avg_throughput / fcfs.avg_throughput
    q = crius.avg_queuing_time / fcfs.avg_queuing_time
    ok = (jct <= C4_MAX_JCT_RATIO and tp >= C4_MIN_TP_RATIO and q <= C4_MAX_QUEUE_RATIO
          and elapsed < C4_BUDGET_S)
    record(4, ok, f"JCT x{jct:.3f}, throughput x{tp:.3f}, queuing x{q:.3f} vs fcfs, {elapsed:.1f}s")
    assert ok


def test_c5_ablations_ordered(sims):
    tp = {p: sims.get(p).metrics.avg_throughput
          for p in ("crius", "crius_no_adaptivity", "crius_no_heterogeneity", "fcfs")}
    ok = (tp["crius"] >= tp["crius_no_adaptivity"] >= tp["fcfs"]
          and tp["crius"] >= tp["crius_no_heterogeneity"] >= tp["fcfs"])
    record(5, ok, ", ".join(f"{k} {v:.2f}" for k, v in tp.items()))
    assert ok


def test_c6_deadlines_strict(sims, desk_ddl_trace):
    res = sims.get("crius_ddl", trace="ddl")
    by_id = {r.job_id: r for r in desk_ddl_trace}
    ddl_jobs = [m for m in res.metrics.jobs if by_id[m.job_id].deadline is not None]
    admitted = [m for m in ddl_jobs if m.queuing_time is not None]
    late = [m.job_id for m in admitted if not m.deadline_met]
    dropped = [m for m in res.metrics.jobs if m.dropped_reason is not None]
    burned = [m.job_id for m in dropped if m.gpu_seconds > 0 or m.queuing_time is not None]
    ok = not late and not burned and len(admitted) > 0
    record(6, ok, f"{len(admitted)}/{len(ddl_jobs)} deadline jobs admitted, {len(late)} late, "
                  f"{len(dropped)} dropped, {len(burned)} dropped after using GPUs")
    assert ok


def test_c7_depth_monotone(sims):
    res = [sims.get("crius", d) for d in (1, 2, 3)]
    explored = [r.metrics.explored_choices for r in res]
    jct = [r.metrics.avg_jct for r in res]
    mean_round = [r.perf["mean_round_s"] for r in res]
    max_round = max(r.perf["max_round_s"] for r in res)
    ok = (explored[0] < explored[1] < explored[2]
          and all(b <= a * C7_JCT_SLACK for a, b in zip(jct, jct[1:]))
          and mean_round[0] < mean_round[1] < mean_round[2]
          and max_round < C7_MAX_ROUND_S)
    record(7, ok, f"explored {explored}, JCT h {[round(j / 3600, 2) for j in jct]}, "
                  f"mean round s {[round(m, 4) for m in mean_round]}, max round {max_round:.2f}s")
    assert ok


def test_c8_safety_invariants(sims, desk_cfg, tmp_path):
    # every cached simulation: capacity checked each event, nothing left in limbo
    problems = []
    for key, res in sims.results.items():
        m = res.metrics
        if res.capacity_checks < m.events:
            problems.append(f"{key}: {res.capacity_checks} checks for {m.events} events")
        for j in m.jobs:
            if j.finished == (j.dropped_reason is not None):
                problems.append(f"{key}: {j.job_id} finished={j.finished} dropped={j.dropped_reason}")
    # determinism from scratch: fresh catalog, fresh trace, same seed
    blobs = []
    for i in range(2):
        cat = CellCatalog(desk_cfg.cluster, desk_cfg.costs, desk_cfg.scheduler.max_plans)
        trace = build_workload(desk_cfg, catalog=cat)
        r = run(trace, desk_cfg.cluster, desk_cfg.scheduler, desk_cfg.seed, cat)
        write_outputs(r, tmp_path / str(i))
        blobs.append((tmp_path / str(i) / "metrics.json").read_bytes())
    same = blobs[0] == blobs[1]
    cached = sims.results.get(("plain", "crius", 3))
    if cached is not None:
        write_outputs(cached, tmp_path / "cached")
        same = same and (tmp_path / "cached" / "metrics.json").read_bytes() == blobs[0]
    ok = not problems and same
    record(8, ok, f"{len(sims.results)} cached runs checked, {len(problems)} problems, "
                  f"metrics.json identical across runs: {same}")
    assert ok, problems[:5]


def test_c9_partition_properties():
    rnd = random.Random(909)
    fams = list(Family)
    bad = 0
    for _ in range(C9_TRIPLES):
        fam = rnd.choice(fams)
        size = rnd.choice(TABLE_SIZES.get(fam) or (0.5, 1.0, 2.0))
        gbs = rnd.choice(DEFAULT_TEMPLATES[fam].batch_sizes or (256,))
        model = build_model(fam, size * 1e9, gbs)
        g = 1 << rnd.randint(0, 6)
        s = rnd.randint(1, min(g, len(model.operators)))
        part = determine_stages(model, g, s)
        covered = list(itertools.chain.from_iterable(st.operator_range for st in part.stages))
        if sum(st.assigned_gpus for st in part.stages) != g or covered != list(range(len(model.operators))) \
                or len(part.stages) != s:
            bad += 1
    uniform = build_model("Synthetic", 1e9, 256)
    unequal = []
    for g in (1, 2, 4, 8, 16, 32, 64):
        s = 1
        while s <= min(g, len(uniform.operators)):
            part = determine_stages(uniform, g, s)
            fpg = {st.flops_per_sample / st.assigned_gpus for st in part.stages}
            if len(fpg) != 1:
                unequal.append((g, s))
            s *= 2
    ok = bad == 0 and not unequal
    record(9, ok, f"{C9_TRIPLES} random triples, {bad} violations; uniform model unequal at {unequal}")
    assert ok
