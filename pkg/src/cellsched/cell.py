"""Cells: a job bound to a GPU type, a GPU count and a fixed stage partition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

from .cluster import Cluster
from .workload import DEFAULT_TEMPLATES, TABLE_SIZES, Family, ModelSpec, TraceRecord, build_model


def is_pow2(n: int) -> bool:
    return n >= 1 and not n & (n - 1)


def pow2_upto(n: int) -> list[int]:
    out, p = [], 1
    while p <= n:
        out.append(p)
        p *= 2
    return out


@dataclass(frozen=True)
class Stage:
    first_op: int
    last_op: int  # inclusive
    assigned_gpus: int
    flops_per_sample: float
    param_bytes: int
    activation_bytes_per_sample: float
    inbound_boundary_bytes_per_sample: float

    @property
    def operator_range(self) -> range:
        return range(self.first_op, self.last_op + 1)


@dataclass(frozen=True)
class StagePartition:
    stages: tuple[Stage, ...]

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def total_gpus(self) -> int:
        return sum(s.assigned_gpus for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "n_stages": self.n_stages,
            "stages": [
                {"operators": [s.first_op, s.last_op], "gpus": s.assigned_gpus,
                 "flops_per_sample": s.flops_per_sample, "param_bytes": s.param_bytes,
                 "inbound_bytes_per_sample": s.inbound_boundary_bytes_per_sample}
                for s in self.stages
            ],
        }


@dataclass(frozen=True)
class Cell:
    job_id: str
    gpu_type: str
    total_gpus: int
    partition: StagePartition
    model: ModelSpec

    @property
    def n_stages(self) -> int:
        return self.partition.n_stages

    @property
    def stages(self) -> tuple[Stage, ...]:
        return self.partition.stages

    @property
    def key(self) -> tuple:
        return (self.model.key, self.gpu_type, self.total_gpus, self.n_stages)

    def to_dict(self) -> dict:
        return {"job_id": self.job_id, "gpu_type": self.gpu_type, "gpus": self.total_gpus,
                "model": self.model.name, **self.partition.to_dict()}


def gpu_fractions(model: ModelSpec, n_gpus: int) -> list[float]:
    """Fractional GPUs per operator, proportional to its share of FLOPs."""
    total = model.total_flops_per_sample
    return [n_gpus * op.flops_per_sample / total for op in model.operators]


def nearest_pow2(x: float) -> int:
    if x <= 1:
        return 1
    lo = 1 << (int(math.floor(x)).bit_length() - 1)
    hi = lo * 2
    return hi if hi - x <= x - lo else lo


def _choose_boundaries(model: ModelSpec, k: int) -> tuple[int, ...]:
    """Gaps (boundary after operator j) for k cuts.

    Picks the k smallest-traffic gaps.  Among equally cheap candidates the set
    minimizing the largest stage FLOPs wins, then the lexicographically
    earliest set.
    """
    n = len(model.operators)
    if k == 0:
        return ()
    traffic = [model.operators[j].boundary_bytes_per_sample for j in range(n - 1)]
    thr = sorted(traffic)[k - 1]
    mandatory = {j for j in range(n - 1) if traffic[j] < thr}
    cands = sorted(j for j in range(n - 1) if traffic[j] <= thr)
    flops = [op.flops_per_sample for op in model.operators]

    @lru_cache(maxsize=None)
    def seg(a: int, b: int) -> float:
        return math.fsum(flops[a:b + 1])

    def skips_mandatory(lo: int, hi: int) -> bool:
        # any mandatory gap strictly between cut lo and cut hi (lo=-1 is the start)
        return any(lo < m < hi for m in mandatory)

    @lru_cache(maxsize=None)
    def best(last: int, remaining: int) -> float:
        # minimal achievable max-segment FLOPs from the cut after `last`
        if remaining == 0:
            if skips_mandatory(last, n - 1):
                return math.inf
            return seg(last + 1, n - 1)
        out = math.inf
        for q in cands:
            if q <= last or skips_mandatory(last, q):
                continue
            out = min(out, max(seg(last + 1, q), best(q, remaining - 1)))
        return out

    target = best(-1, k)

    @lru_cache(maxsize=None)
    def feasible(last: int, remaining: int) -> bool:
        if remaining == 0:
            return not skips_mandatory(last, n - 1) and seg(last + 1, n - 1) <= target
        return any(
            q > last and not skips_mandatory(last, q) and seg(last + 1, q) <= target
            and feasible(q, remaining - 1)
            for q in cands)

    chosen, last = [], -1
    for r in range(k, 0, -1):
        for q in cands:
            if (q > last and not skips_mandatory(last, q) and seg(last + 1, q) <= target
                    and feasible(q, r - 1)):
                chosen.append(q)
                last = q
                break
    return tuple(chosen)


def _assign_gpus(fracs: list[float], stage_flops: list[float], n_gpus: int) -> list[int]:
    g = [nearest_pow2(f) for f in fracs]

    def fpg(i):
        return stage_flops[i] / g[i]

    while sum(g) > n_gpus:
        excess = sum(g) - n_gpus
        cands = [i for i in range(len(g)) if g[i] >= 2 and g[i] // 2 <= excess]
        if not cands:
            cands = [i for i in range(len(g)) if g[i] >= 2]
        i = min(cands, key=lambda i: (fpg(i), i))
        g[i] //= 2
    while sum(g) < n_gpus:
        deficit = n_gpus - sum(g)
        cands = [i for i in range(len(g)) if g[i] <= deficit]
        i = max(cands, key=lambda i: (fpg(i), -i))
        g[i] *= 2
    return g


def determine_stages(model: ModelSpec, n_gpus: int, n_stages: int) -> StagePartition:
    n_ops = len(model.operators)
    if not is_pow2(n_gpus):
        raise ValueError(f"n_gpus must be a power of two, got {n_gpus}")
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if n_stages > n_ops:
        raise ValueError(f"n_stages={n_stages} exceeds the model's {n_ops} operators")
    if n_gpus < n_stages:
        raise ValueError(f"n_gpus={n_gpus} is fewer than n_stages={n_stages}")
    return _determine_stages(model, n_gpus, n_stages)


def _layout(model: ModelSpec, n_gpus: int, cuts: tuple[int, ...]):
    ops = model.operators
    firsts = [0] + [c + 1 for c in cuts]
    lasts = list(cuts) + [len(ops) - 1]
    frac = gpu_fractions(model, n_gpus)
    stage_flops = [math.fsum(op.flops_per_sample for op in ops[a:b + 1]) for a, b in zip(firsts, lasts)]
    stage_frac = [math.fsum(frac[a:b + 1]) for a, b in zip(firsts, lasts)]
    gpus = _assign_gpus(stage_frac, stage_flops, n_gpus)
    per_gpu = [f / g for f, g in zip(stage_flops, gpus)]
    return firsts, lasts, stage_flops, gpus, max(per_gpu) / min(per_gpu)


def _refine(model: ModelSpec, n_gpus: int, cuts: tuple[int, ...]) -> tuple[int, ...]:
    """Shift single cuts to adjacent equal-traffic gaps while FLOPs-per-GPU balance improves."""
    n = len(model.operators)
    traffic = [op.boundary_bytes_per_sample for op in model.operators]
    ratio = _layout(model, n_gpus, cuts)[4]
    while True:
        best = None
        for i, c in enumerate(cuts):
            lo = cuts[i - 1] if i else -1
            hi = cuts[i + 1] if i + 1 < len(cuts) else n - 1
            for q in (c - 1, c + 1):
                if not lo < q < hi or traffic[q] != traffic[c]:
                    continue
                trial = cuts[:i] + (q,) + cuts[i + 1:]
                r = _layout(model, n_gpus, trial)[4]
                if r < ratio and (best is None or r < best[0]):
                    best = (r, trial)
        if best is None:
            return cuts
        ratio, cuts = best


@lru_cache(maxsize=16384)
def _determine_stages(model: ModelSpec, n_gpus: int, n_stages: int) -> StagePartition:
    ops = model.operators
    cuts = _refine(model, n_gpus, _choose_boundaries(model, n_stages - 1))
    firsts, lasts, stage_flops, gpus, _ = _layout(model, n_gpus, cuts)
    stages = tuple(
        Stage(
            first_op=a, last_op=b, assigned_gpus=gpus[i],
            flops_per_sample=stage_flops[i],
            param_bytes=sum(op.param_bytes for op in ops[a:b + 1]),
            activation_bytes_per_sample=math.fsum(op.activation_bytes_per_sample for op in ops[a:b + 1]),
            inbound_boundary_bytes_per_sample=0.0 if a == 0 else ops[a - 1].boundary_bytes_per_sample,
        )
        for i, (a, b) in enumerate(zip(firsts, lasts))
    )
    return StagePartition(stages)


def candidate_gpu_counts(requested: int) -> list[int]:
    return sorted({g for g in (requested // 2, requested, requested * 2) if g >= 1})


def candidate_stage_counts(n_gpus: int, n_ops: int) -> list[int]:
    return [s for s in pow2_upto(n_gpus) if s <= n_ops]


def plan_space_bound(partition: StagePartition) -> int:
    """Upper bound on the pruned tuning product (also bounds the 2^N_S assembly)."""
    out = 1
    for st in partition.stages:
        if st.assigned_gpus > 1:
            out *= (st.assigned_gpus.bit_length() - 1) // 2 + 2
    return out


def generate_cells(job: TraceRecord, cluster: Cluster, max_plans: int | None = None) -> list[Cell]:
    """All Cells for a job: GPU types x {N_G/2, N_G, 2N_G} x power-of-two stage counts.

    ``max_plans`` skips partitions whose plan space (see
    :func:`plan_space_bound`) would exceed it.
    """
    if not is_pow2(job.requested_gpus):
        raise ValueError(f"{job.job_id}: requested GPU count must be a power of two")
    n_ops = len(job.model.operators)
    cells = []
    for group in cluster.groups:
        for g in candidate_gpu_counts(job.requested_gpus):
            if g > group.capacity:
                continue
            for s in candidate_stage_counts(g, n_ops):
                part = determine_stages(job.model, g, s)
                if max_plans is not None and plan_space_bound(part) > max_plans:
                    continue
                cells.append(Cell(job.job_id, group.gpu.type_name, g, part, job.model))
    return cells


def random_cell(rng, cluster: Cluster, max_stages: int = 4, max_gpus: int = 16,
                job_id: str = "rand") -> Cell:
    """A seeded random Cell for property suites and batch tuning."""
    fams = [Family.BERT, Family.MOE, Family.WIDERESNET, Family.SYNTHETIC]
    fam = fams[int(rng.integers(len(fams)))]
    sizes = TABLE_SIZES.get(fam, (0.5, 1.0, 2.0, 4.0))
    size = float(sizes[int(rng.integers(len(sizes)))])
    batches = DEFAULT_TEMPLATES[fam].batch_sizes or (128, 256, 512)
    model = build_model(fam, size * 1e9, int(batches[int(rng.integers(len(batches)))]))
    group = cluster.groups[int(rng.integers(len(cluster.groups)))]
    counts = pow2_upto(min(max_gpus, group.capacity))
    g = counts[int(rng.integers(len(counts)))]
    s = int(rng.integers(1, min(max_stages, g, len(model.operators)) + 1))
    return Cell(job_id, group.gpu.type_name, g, determine_stages(model, g, s), model)
