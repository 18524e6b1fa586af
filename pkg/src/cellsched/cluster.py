"""Heterogeneous GPU inventory and offline communication latency tables."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

GIB = 1 << 30
MIB = 1 << 20
KIB = 1 << 10

COLLECTIVES = ("send_recv", "all_gather", "all_reduce")


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class GpuSpec:
    type_name: str
    arch: str
    memory: int
    peak_flops: float
    compute_efficiency: float = 1.0

    def __post_init__(self):
        if self.memory <= 0:
            raise ClusterError(f"{self.type_name}: memory must be > 0")
        if self.peak_flops <= 0:
            raise ClusterError(f"{self.type_name}: peak_flops must be > 0")
        if not 0 < self.compute_efficiency <= 1:
            raise ClusterError(f"{self.type_name}: compute_efficiency must be in (0, 1]")


@dataclass(frozen=True)
class NodeGroup:
    gpu: GpuSpec
    gpus_per_node: int
    node_count: int
    intra_node_link: str
    inter_node_link: str

    def __post_init__(self):
        if self.gpus_per_node < 1 or self.node_count < 1:
            raise ClusterError(f"{self.gpu.type_name}: gpus_per_node and node_count must be >= 1")

    @property
    def capacity(self) -> int:
        return self.gpus_per_node * self.node_count


@dataclass(frozen=True)
class LinkTable:
    """Piecewise-linear volume (bytes) -> latency (s), anchored at (0, base)."""

    base_latency: float
    volumes: tuple[float, ...]
    latencies: tuple[float, ...]

    def __post_init__(self):
        if self.base_latency < 0:
            raise ClusterError("base latency must be >= 0")
        if len(self.volumes) != len(self.latencies) or not self.volumes:
            raise ClusterError("link table needs matching, non-empty volume/latency knots")
        xs = (0.0,) + tuple(self.volumes)
        ys = (self.base_latency,) + tuple(self.latencies)
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ClusterError("link table volumes must be strictly increasing and > 0")
        if any(b < a for a, b in zip(ys, ys[1:])):
            raise ClusterError("link table latencies must be non-decreasing")

    def __call__(self, volume: float) -> float:
        if volume <= 0:
            return self.base_latency
        xs = (0.0,) + self.volumes
        ys = (self.base_latency,) + self.latencies
        i = bisect.bisect_left(xs, volume)
        if i < len(xs) and xs[i] == volume:
            return ys[i]
        # past the last knot: extend the final segment
        i = min(i, len(xs) - 1)
        x0, x1, y0, y1 = xs[i - 1], xs[i], ys[i - 1], ys[i]
        return y0 + (y1 - y0) * (volume - x0) / (x1 - x0)


@dataclass(frozen=True)
class InterconnectProfile:
    links: Mapping[str, LinkTable]
    overrides: Mapping[tuple[str, str], LinkTable] = field(default_factory=dict)

    def table(self, link: str, collective: str) -> LinkTable:
        if collective not in COLLECTIVES:
            raise ClusterError(f"unknown collective {collective!r}")
        got = self.overrides.get((link, collective)) or self.links.get(link)
        if got is None:
            raise ClusterError(f"unknown link class {link!r}")
        return got


def effective_volume(collective: str, volume: float, participants: int) -> float:
    p = participants
    if collective == "all_reduce":
        return 2.0 * (p - 1) / p * volume
    if collective == "all_gather":
        return (p - 1) / p * volume
    if collective == "send_recv":
        return volume
    raise ClusterError(f"unknown collective {collective!r}")


def comm_latency(profile: InterconnectProfile, link: str, collective: str,
                 volume: float, participants: int = 2) -> float:
    """Latency of one collective: ring-shaped volume, then table interpolation."""
    table = profile.table(link, collective)
    if volume < 0:
        raise ValueError("volume must be >= 0")
    if collective == "send_recv":
        if participants != 2:
            raise ValueError("send_recv takes exactly 2 participants")
    elif participants < 2:
        raise ValueError(f"{collective} needs at least 2 participants")
    return table(effective_volume(collective, volume, participants))


@dataclass(frozen=True)
class Cluster:
    groups: tuple[NodeGroup, ...]
    interconnects: InterconnectProfile

    def __post_init__(self):
        if not self.groups:
            raise ClusterError("cluster has no node groups")
        names = [g.gpu.type_name for g in self.groups]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ClusterError(f"duplicate GPU type name(s): {sorted(dup)}")
        for g in self.groups:
            for link in (g.intra_node_link, g.inter_node_link):
                if link not in self.interconnects.links:
                    raise ClusterError(
                        f"{g.gpu.type_name}: link class {link!r} has no interconnect table")

    @property
    def gpu_types(self) -> list[str]:
        return [g.gpu.type_name for g in self.groups]

    def group(self, gpu_type: str) -> NodeGroup:
        for g in self.groups:
            if g.gpu.type_name == gpu_type:
                return g
        raise ClusterError(f"unknown GPU type {gpu_type!r}")

    @property
    def total_gpus(self) -> int:
        return sum(g.capacity for g in self.groups)


def capacity(cluster: Cluster, gpu_type: str) -> int:
    return cluster.group(gpu_type).capacity


def _table(spec: Mapping[str, Any], where: str) -> LinkTable:
    try:
        knots = [tuple(k) for k in spec["knots"]]
        return LinkTable(float(spec.get("base_latency_s", 0.0)),
                         tuple(float(v) for v, _ in knots),
                         tuple(float(t) for _, t in knots))
    except KeyError as exc:
        raise ClusterError(f"{where}: missing field {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise ClusterError(f"{where}: {exc}") from None


def load_cluster(spec: Mapping[str, Any]) -> Cluster:
    """Build a :class:`Cluster` from the ``[cluster]`` config section.

    Expected keys: ``groups`` (list of tables with ``gpu``, ``gpus_per_node``,
    ``node_count``, ``intra_node_link``, ``inter_node_link``), ``gpus``
    (type name -> ``arch``, ``memory_gib``, ``peak_tflops``,
    ``compute_efficiency``) and ``interconnects`` (link class ->
    ``base_latency_s``, ``knots`` = [[bytes, seconds], ...], optionally one
    sub-table per collective overriding the knots).
    """
    groups_spec = spec.get("groups") or []
    if not groups_spec:
        raise ClusterError("cluster.groups: at least one node group is required")
    gpus = spec.get("gpus") or {}
    links: dict[str, LinkTable] = {}
    overrides: dict[tuple[str, str], LinkTable] = {}
    for name, lspec in (spec.get("interconnects") or {}).items():
        links[name] = _table(lspec, f"cluster.interconnects.{name}")
        for coll in COLLECTIVES:
            if coll in lspec:
                overrides[(name, coll)] = _table(lspec[coll], f"cluster.interconnects.{name}.{coll}")
    groups = []
    for i, g in enumerate(groups_spec):
        where = f"cluster.groups[{i}]"
        try:
            tname = g["gpu"]
            gs = gpus.get(tname)
            if gs is None:
                raise ClusterError(f"{where}: GPU type {tname!r} not described under cluster.gpus")
            gpu = GpuSpec(tname, gs.get("arch", ""), int(float(gs["memory_gib"]) * GIB),
                          float(gs["peak_tflops"]) * 1e12, float(gs.get("compute_efficiency", 1.0)))
            groups.append(NodeGroup(gpu, int(g["gpus_per_node"]), int(g["node_count"]),
                                    g["intra_node_link"], g["inter_node_link"]))
        except KeyError as exc:
            raise ClusterError(f"{where}: missing field {exc.args[0]}") from None
    return Cluster(tuple(groups), InterconnectProfile(links, overrides))


def bandwidth_knots(bandwidth: float, base: float,
                    volumes: Sequence[float] = (64 * KIB, MIB, 16 * MIB, 256 * MIB, GIB),
                    half_bw_volume: float = 256 * KIB) -> list[list[float]]:
    """Knots for a link that reaches half its bandwidth at ``half_bw_volume``.

    Used to author config tables; the simulator itself only interpolates.
    """
    out = []
    for v in volumes:
        eff = bandwidth * v / (v + half_bw_volume)
        out.append([float(v), base + v / eff])
    return out
