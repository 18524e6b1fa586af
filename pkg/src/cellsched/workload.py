"""Synthetic large-model specifications and job traces.

A model is an ordered chain of operators; each operator carries per-sample
FLOPs, parameter bytes, resident activation bytes and the traffic it would send
to its successor if a pipeline boundary were placed after it.  Families are
parameterized templates, not real graphs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 2


class Family(str, Enum):
    WIDERESNET = "WideResNet"
    BERT = "BERT"
    MOE = "MoE"
    SYNTHETIC = "Synthetic"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for fam in cls:
            if fam.value.lower() == key or fam.name.lower() == key:
                return fam
        if key in ("wres", "wrn", "wideresnet"):
            return cls.WIDERESNET
        raise ValueError(f"unknown model family {value!r}")


@dataclass(frozen=True)
class OperatorSpec:
    id: int
    flops_per_sample: float
    param_bytes: int
    activation_bytes_per_sample: float
    boundary_bytes_per_sample: float

    def __post_init__(self):
        if self.flops_per_sample <= 0:
            raise ValueError(f"operator {self.id}: flops_per_sample must be > 0")
        if min(self.param_bytes, self.activation_bytes_per_sample, self.boundary_bytes_per_sample) < 0:
            raise ValueError(f"operator {self.id}: byte counts must be >= 0")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    family: Family
    operators: tuple[OperatorSpec, ...]
    param_count: float
    global_batch_size: int

    def __post_init__(self):
        if not self.operators:
            raise ValueError("model needs at least one operator")

    @property
    def total_flops_per_sample(self) -> float:
        return math.fsum(op.flops_per_sample for op in self.operators)

    @property
    def total_param_bytes(self) -> int:
        return sum(op.param_bytes for op in self.operators)

    @property
    def key(self) -> tuple:
        return (self.name, self.family.value, self.global_batch_size, len(self.operators))


@dataclass(frozen=True)
class FamilyTemplate:
    """Shape of one model family's operator chain.

    ``profile`` selects the per-operator weighting: ``uniform`` (identical
    blocks) or ``wideresnet`` (FLOPs front-loaded, traffic shrinking with depth).
    """

    n_ops: int
    tokens_per_sample: int
    flops_per_param_token: float
    active_fraction: float = 1.0
    act_multiplier: float = 4.0
    boundary_multiplier: float = 1.0
    param_range: tuple[float, float] = (1e6, 1e12)
    batch_sizes: tuple[int, ...] = ()
    profile: str = "uniform"


DEFAULT_TEMPLATES: dict[Family, FamilyTemplate] = {
    Family.WIDERESNET: FamilyTemplate(
        n_ops=16, tokens_per_sample=1, flops_per_param_token=500.0,
        act_multiplier=4.0, param_range=(1e8, 1e10),
        batch_sizes=(256, 512, 1024), profile="wideresnet"),
    Family.BERT: FamilyTemplate(
        n_ops=24, tokens_per_sample=512, flops_per_param_token=6.0,
        act_multiplier=8.0, param_range=(1e8, 2e10),
        batch_sizes=(128, 256, 512)),
    Family.MOE: FamilyTemplate(
        n_ops=16, tokens_per_sample=1024, flops_per_param_token=6.0,
        active_fraction=0.25, act_multiplier=6.0, boundary_multiplier=2.0,
        param_range=(1e8, 5e10), batch_sizes=(256, 512, 1024)),
    Family.SYNTHETIC: FamilyTemplate(
        n_ops=16, tokens_per_sample=512, flops_per_param_token=6.0,
        act_multiplier=4.0, param_range=(1e6, 1e12)),
}

# Table of model sizes (billions of parameters) each family is evaluated with.
TABLE_SIZES: dict[Family, tuple[float, ...]] = {
    Family.WIDERESNET: (0.5, 1.0, 2.0, 4.0, 6.8),
    Family.BERT: (0.76, 1.3, 2.6, 6.7),
    Family.MOE: (0.69, 1.3, 2.4, 10.0, 27.0),
}


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    # largest-remainder split so the parts sum to `total` exactly
    wsum = math.fsum(weights)
    raw = [total * w / wsum for w in weights]
    parts = [int(math.floor(r)) for r in raw]
    short = total - sum(parts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - parts[i]), i))
    for i in order[:short]:
        parts[i] += 1
    return parts


def size_label(param_count: float) -> str:
    return f"{param_count / 1e9:g}B"


def build_model(
    family: "Family | str",
    param_count: float,
    global_batch_size: int,
    templates: Mapping[Family, FamilyTemplate] | None = None,
    bytes_per_param: int = BYTES_PER_PARAM,
) -> ModelSpec:
    fam = Family.parse(family)
    tpl = (templates or DEFAULT_TEMPLATES).get(fam)
    if tpl is None:
        raise ValueError(f"no template configured for family {fam.value}")
    return _build_model(fam, float(param_count), int(global_batch_size), tpl, int(bytes_per_param))


@lru_cache(maxsize=4096)
def _build_model(fam: Family, param_count: float, gbs: int, tpl: FamilyTemplate,
                 bytes_per_param: int) -> ModelSpec:
    if param_count <= 0:
        raise ValueError("param_count must be > 0")
    if gbs <= 0:
        raise ValueError("global_batch_size must be > 0")
    lo, hi = tpl.param_range
    if not lo <= param_count <= hi:
        raise ValueError(
            f"{fam.value} template covers {lo:g}..{hi:g} parameters, got {param_count:g}")
    if fam is not Family.SYNTHETIC and tpl.batch_sizes and gbs not in tpl.batch_sizes:
        raise ValueError(
            f"{fam.value} global batch size must be one of {list(tpl.batch_sizes)}, got {gbs}")

    n = tpl.n_ops
    total_bytes = int(round(param_count * bytes_per_param))
    flops_total = param_count * tpl.active_fraction * tpl.flops_per_param_token * tpl.tokens_per_sample
    hidden = math.sqrt(param_count * tpl.active_fraction / (12.0 * n))
    boundary0 = tpl.tokens_per_sample * hidden * bytes_per_param * tpl.boundary_multiplier

    if tpl.profile == "uniform":
        flops_w = [1.0] * n
        param_w = [1.0] * n
        boundary = [boundary0] * n
    elif tpl.profile == "wideresnet":
        # spatial resolution halves every quarter of the network
        span = max(n - 1, 1)
        flops_w = [1.5 - i / span for i in range(n)]
        param_w = [0.25 + 1.5 * i / span for i in range(n)]
        top = 300.0 * math.sqrt(param_count) * bytes_per_param
        boundary = [top * 2.0 ** -((4 * i) // n) for i in range(n)]
    else:
        raise ValueError(f"unknown template profile {tpl.profile!r}")

    fsum = math.fsum(flops_w)
    params = _apportion(total_bytes, param_w)
    ops = tuple(
        OperatorSpec(
            id=i,
            flops_per_sample=flops_total * flops_w[i] / fsum,
            param_bytes=params[i],
            activation_bytes_per_sample=boundary[i] * tpl.act_multiplier,
            boundary_bytes_per_sample=boundary[i],
        )
        for i in range(n)
    )
    return ModelSpec(f"{fam.value}-{size_label(param_count)}", fam, ops, param_count, gbs)


@dataclass(frozen=True)
class TraceRecord:
    job_id: str
    submit_time: float
    iterations: int
    model: ModelSpec
    requested_gpus: int
    preferred_gpu_type: str | None = None
    deadline: float | None = None
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.requested_gpus < 1 or self.requested_gpus & (self.requested_gpus - 1):
            raise ValueError(f"{self.job_id}: requested_gpus must be a power of two >= 1")
        if self.iterations < 1:
            raise ValueError(f"{self.job_id}: iterations must be >= 1")
        if self.submit_time < 0:
            raise ValueError(f"{self.job_id}: submit_time must be >= 0")


class TraceError(ValueError):
    """Malformed trace input; message names the row and field."""


def floor_pow2(n: int) -> int:
    return 1 << (int(n).bit_length() - 1)


def nominal_iteration_latency(model: ModelSpec, n_gpus: int, gpu_flops: float = 50e12) -> float:
    return model.total_flops_per_sample * model.global_batch_size / (n_gpus * gpu_flops)


def _gpu_count(raw, row: int) -> tuple[int, tuple[str, ...]]:
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise TraceError(f"row {row}: field n_gpus is not an integer: {raw!r}") from None
    if n < 1:
        raise TraceError(f"row {row}: field n_gpus must be >= 1, got {n}")
    p = floor_pow2(n)
    if p != n:
        log.warning("row %d: n_gpus=%d is not a power of two, using %d", row, n, p)
        return p, (f"n_gpus {n} rounded down to {p}",)
    return n, ()


def _number(rec: Mapping, key: str, row: int, kind=float, required=True):
    if key not in rec or rec[key] in (None, ""):
        if required:
            raise TraceError(f"row {row}: missing field {key}")
        return None
    try:
        return kind(rec[key])
    except (TypeError, ValueError):
        raise TraceError(f"row {row}: field {key} has bad value {rec[key]!r}") from None


def load_trace(
    path: "str | Path",
    format: str = "generic_json",
    *,
    seed: int = 0,
    templates: Mapping[Family, FamilyTemplate] | None = None,
    size_choices: Mapping[Family, Sequence[float]] | None = None,
    latency_fn: Callable[[ModelSpec, int], float] | None = None,
    bytes_per_param: int = BYTES_PER_PARAM,
) -> list[TraceRecord]:
    """Read a trace file and return its records sorted by submit time.

    ``philly_csv`` rows carry no model; one is drawn per row from a generator
    seeded with ``seed``, and the iteration count is the row's duration divided
    by ``latency_fn(model, n_gpus)`` (a nominal FLOPs-based latency by default).
    """
    path = Path(path)
    text = path.read_text()
    if format == "generic_json":
        records = _load_json(text, templates, bytes_per_param)
    elif format == "philly_csv":
        records = _load_philly(text, seed, templates, size_choices, latency_fn, bytes_per_param)
    else:
        raise ValueError(f"unknown trace format {format!r}")
    return sorted(records, key=lambda r: (r.submit_time, r.job_id))


def _load_json(text, templates, bytes_per_param) -> list[TraceRecord]:
    if not text.strip():
        return []
    data = json.loads(text)
    if not isinstance(data, list):
        raise TraceError("generic_json trace must be a JSON array")
    out = []
    for row, rec in enumerate(data, start=1):
        if not isinstance(rec, dict):
            raise TraceError(f"row {row}: expected an object")
        if not rec.get("job_id"):
            raise TraceError(f"row {row}: missing field job_id")
        n, warn = _gpu_count(rec.get("n_gpus"), row)
        try:
            model = build_model(rec.get("model_family", ""),
                                _number(rec, "model_params_billion", row) * 1e9,
                                _number(rec, "global_batch", row, int),
                                templates, bytes_per_param)
        except TraceError:
            raise
        except ValueError as exc:
            raise TraceError(f"row {row}: field model_family/model_params_billion/global_batch: {exc}") from None
        submit = _number(rec, "submit_time_s", row)
        iters = _number(rec, "iterations", row, int)
        if submit < 0:
            raise TraceError(f"row {row}: field submit_time_s must be >= 0")
        if iters < 1:
            raise TraceError(f"row {row}: field iterations must be >= 1")
        out.append(TraceRecord(
            job_id=str(rec["job_id"]), submit_time=submit, iterations=iters, model=model,
            requested_gpus=n, preferred_gpu_type=rec.get("gpu_type") or None,
            deadline=_number(rec, "deadline_s", row, required=False), warnings=warn))
    return out


def _load_philly(text, seed, templates, size_choices, latency_fn, bytes_per_param) -> list[TraceRecord]:
    rows = list(csv.DictReader(text.splitlines()))
    if not rows:
        return []
    missing = {"job_id", "submit_time_s", "duration_s", "n_gpus"} - set(rows[0])
    if missing:
        raise TraceError(f"row 1: missing column(s) {sorted(missing)}")
    sizes = size_choices or TABLE_SIZES
    families = sorted(sizes, key=lambda f: f.value)
    tpls = templates or DEFAULT_TEMPLATES
    rng = np.random.default_rng(seed)
    latency_fn = latency_fn or nominal_iteration_latency
    out = []
    for row, rec in enumerate(rows, start=1):
        if not rec.get("job_id"):
            raise TraceError(f"row {row}: missing field job_id")
        submit = _number(rec, "submit_time_s", row)
        duration = _number(rec, "duration_s", row)
        if submit < 0:
            raise TraceError(f"row {row}: field submit_time_s must be >= 0")
        if duration <= 0:
            raise TraceError(f"row {row}: field duration_s must be > 0")
        n, warn = _gpu_count(rec["n_gpus"], row)
        fam = families[int(rng.integers(len(families)))]
        size = float(sizes[fam][int(rng.integers(len(sizes[fam])))])
        batches = tpls[fam].batch_sizes or (256,)
        gbs = int(batches[int(rng.integers(len(batches)))])
        model = build_model(fam, size * 1e9, gbs, templates, bytes_per_param)
        iters = max(1, int(round(duration / latency_fn(model, n))))
        out.append(TraceRecord(str(rec["job_id"]), submit, iters, model, n, warnings=warn))
    return out


def _normalized(weights: Mapping, what: str) -> tuple[list, np.ndarray]:
    keys = list(weights)
    w = np.array([float(weights[k]) for k in keys], dtype=float)
    if len(w) == 0 or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"{what} weights must be non-negative and not all zero")
    return keys, w / w.sum()


def synthesize_trace(
    seed: int,
    job_count: int,
    arrival_per_hour: float,
    model_mix: Mapping["Family | str", float],
    gpu_count_choices: Sequence[int],
    gpu_type_weights: Mapping[str, float],
    *,
    size_choices: Mapping[Family, Sequence[float]] | None = None,
    iterations_range: tuple[int, int] = (100, 5000),
    templates: Mapping[Family, FamilyTemplate] | None = None,
    bytes_per_param: int = BYTES_PER_PARAM,
    min_gpus: Callable[[ModelSpec], int | None] | None = None,
    deadline_fraction: float = 0.0,
    deadline_slack: tuple[float, float] = (1.5, 4.0),
    latency_fn: Callable[[ModelSpec, int], float] | None = None,
) -> list[TraceRecord]:
    """Seeded Poisson-arrival trace.

    ``min_gpus`` lets the caller lift a drawn GPU count to the smallest power of
    two on which the model fits at all; models it reports as unplaceable
    (``None``) are redrawn.  Deadlines, when requested, are
    ``submit + slack * iterations * latency_fn(model, N_G)``.
    """
    if job_count < 0:
        raise ValueError("job_count must be >= 0")
    if job_count == 0:
        return []
    if arrival_per_hour <= 0:
        raise ValueError("arrival rate must be > 0")
    if not gpu_count_choices:
        raise ValueError("gpu_count_choices must be non-empty")
    fams, fam_p = _normalized({Family.parse(k): v for k, v in model_mix.items()}, "model_mix")
    types, type_p = _normalized(gpu_type_weights, "gpu_type")
    sizes = size_choices or TABLE_SIZES
    tpls = templates or DEFAULT_TEMPLATES
    lo_it, hi_it = iterations_range
    latency_fn = latency_fn or nominal_iteration_latency
    # separate streams: the arrival and family sequences stay fixed when
    # sizes, GPU choices or redraws change
    arr_rng, fam_rng, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))

    out = []
    t = 0.0
    width = len(str(job_count - 1))
    for i in range(job_count):
        t += float(arr_rng.exponential(3600.0 / arrival_per_hour))
        for _ in range(100):
            fam = fams[int(fam_rng.choice(len(fams), p=fam_p))]
            fam_sizes = sizes.get(fam) or (1.0,)
            size = float(fam_sizes[int(rng.integers(len(fam_sizes)))])
            batches = tpls[fam].batch_sizes or (256,)
            gbs = int(batches[int(rng.integers(len(batches)))])
            model = build_model(fam, size * 1e9, gbs, templates, bytes_per_param)
            n_g = int(gpu_count_choices[int(rng.integers(len(gpu_count_choices)))])
            if min_gpus is None:
                break
            need = min_gpus(model)
            if need is not None:
                n_g = max(n_g, need)
                break
        else:
            raise ValueError("min_gpus rejected every drawn model")
        n_g = floor_pow2(n_g)
        iters = int(round(math.exp(rng.uniform(math.log(lo_it), math.log(hi_it)))))
        gtype = types[int(rng.choice(len(types), p=type_p))]
        deadline = None
        if deadline_fraction > 0 and rng.random() < deadline_fraction:
            slack = float(rng.uniform(*deadline_slack))
            deadline = t + slack * iters * latency_fn(model, n_g)
        out.append(TraceRecord(f"job{i:0{width}d}", t, max(1, iters), model, n_g, gtype, deadline))
    return out
