import dataclasses
import sys

import pytest

from ndbfs import fsops as F
from ndbfs.harness.cluster import FileSystemCluster
from ndbfs.harness.config import HarnessConfig
from ndbfs.ndbsim import SimClock


def sim_cluster(n: int = 1, **cfg_kw) -> FileSystemCluster:
    cfg = dataclasses.replace(HarnessConfig(deterministic=True), **cfg_kw)
    return FileSystemCluster(cfg, num_namenodes=n, clock=SimClock())


def deep_dir(nn, depth: int) -> str:
    """Create /d1/.../d{depth-1} and return it; a file inside sits at ``depth``."""
    path = ""
    for i in range(1, depth):
        path += f"/d{i}"
        F.mkdir(nn, path)
    return path or "/"


@pytest.fixture
def cluster():
    return sim_cluster(1)


@pytest.fixture
def nn(cluster):
    return cluster.namenodes[0]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
