from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cellsched.cluster import (GIB, MIB, Cluster, GpuSpec, InterconnectProfile, LinkTable,
                               NodeGroup)
from cellsched.config import build_workload, load_config, parse_config
from cellsched.scheduler import CellCatalog, SchedulerConfig
from cellsched.simulator import run

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.toml"

# criterion number -> (passed, detail); printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {detail}")


def tiny_profile() -> InterconnectProfile:
    fast = LinkTable(1e-6, (MIB, GIB), (1e-5, 1e-2))
    slow = LinkTable(1e-5, (MIB, GIB), (1e-4, 1e-1))
    return InterconnectProfile({"fast": fast, "slow": slow})


def tiny_cluster(caps=(("X", 2, 4), ("Y", 2, 4)), memory=40 * GIB) -> Cluster:
    groups = tuple(
        NodeGroup(GpuSpec(name, "test", memory, 100e12, 0.5), gpn, nodes, "fast", "slow")
        for name, gpn, nodes in caps)
    return Cluster(groups, tiny_profile())


@pytest.fixture(scope="session")
def default_cfg():
    return parse_config({})


@pytest.fixture(scope="session")
def desk_cfg():
    return load_config(DESK)


@pytest.fixture(scope="session")
def desk_catalog(desk_cfg):
    return CellCatalog(desk_cfg.cluster, desk_cfg.costs, desk_cfg.scheduler.max_plans)


@pytest.fixture(scope="session")
def desk_trace(desk_cfg, desk_catalog):
    return build_workload(desk_cfg, catalog=desk_catalog)


@pytest.fixture(scope="session")
def desk_ddl_trace(desk_cfg, desk_catalog):
    cfg = dataclasses.replace(
        desk_cfg, workload=dataclasses.replace(desk_cfg.workload, deadline_fraction=0.5))
    return build_workload(cfg, catalog=desk_catalog)


class SimCache:
    """Runs each (trace, policy, depth) once per session."""

    def __init__(self, cfg, catalog, traces):
        self.cfg, self.catalog, self.traces = cfg, catalog, traces
        self.results = {}

    def get(self, policy="crius", depth=3, trace="plain", fresh=False):
        key = (trace, policy, depth)
        if fresh or key not in self.results:
            sc = dataclasses.replace(self.cfg.scheduler, policy=policy, search_depth=depth)
            res = run(self.traces[trace], self.cfg.cluster, sc, self.cfg.seed, self.catalog)
            if fresh:
                return res
            self.results[key] = res
        return self.results[key]


@pytest.fixture(scope="session")
def sims(desk_cfg, desk_catalog, desk_trace, desk_ddl_trace):
    return SimCache(desk_cfg, desk_catalog, {"plain": desk_trace, "ddl": desk_ddl_trace})


@pytest.fixture
def small_sched_config():
    return SchedulerConfig(search_depth=2, interval=60.0, restart_penalty=10.0, min_move_gain=0.0)
