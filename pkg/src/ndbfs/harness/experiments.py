"""Depth, hotspot, failover and subtree-crash experiments."""
from __future__ import annotations

import dataclasses
from typing import Iterable, Optional

from .. import fsops as F
from ..fsops import OpKind
from ..ndbsim import SimClock
from .bench import run_benchmark
from .cluster import FileSystemCluster
from .config import HarnessConfig
from .fsck import fsck
from .metrics import MetricsReport
from .workload import WorkloadMix, generate_namespace


def _det(cfg: Optional[HarnessConfig]) -> HarnessConfig:
    return dataclasses.replace(cfg or HarnessConfig(), deterministic=True)


def _chain(depth: int) -> list:
    return ["/" + "/".join(f"d{i}" for i in range(1, k + 1)) for k in range(1, depth)]


def depth_experiment(op: OpKind, depths: Iterable[int] = (4, 6, 8, 10, 12),
                     cfg: Optional[HarnessConfig] = None) -> list:
    """Warm and cold ledgers of one operation at each target depth.

    Every measurement runs on a fresh single-namenode cluster; the cold case
    empties the hint cache first.
    """
    op = OpKind(op)
    if op not in (OpKind.CREATE_FILE, OpKind.GET_BLOCK_LOCATIONS):
        raise ValueError("depth experiment supports CreateFile and GetBlockLocations")
    cfg = _det(cfg)
    cost = cfg.cost
    rows = []
    for depth in depths:
        cl = FileSystemCluster(cfg, num_namenodes=1, clock=SimClock())
        nn = cl.namenodes[0]
        for d in _chain(depth):
            F.mkdir(nn, d)
        parent = _chain(depth)[-1] if depth > 1 else ""
        ledgers = {}
        for mode in ("cold", "warm"):
            path = f"{parent}/f-{mode}"
            if op is OpKind.CREATE_FILE:
                if mode == "cold":
                    nn.cache.clear()
                else:
                    F.stat(nn, parent or "/")
                F.create_file(nn, path)
            else:
                F.create_file(nn, path)
                F.add_block(nn, path)
                if mode == "cold":
                    nn.cache.clear()
                else:
                    F.stat(nn, path)
                F.get_block_locations(nn, path)
            ledgers[mode] = F.last_result().ledger
        cold, warm = ledgers["cold"].total(), ledgers["warm"].total()
        rows.append({
            "op": op.value, "depth": depth,
            "cold": ledgers["cold"].as_dict(), "warm": ledgers["warm"].as_dict(),
            "cold_total": cold, "warm_total": warm,
            "savings": (cold - warm) / cold if cold else 0.0,
            "cold_throughput": cost.throughput(ledgers["cold"]),
            "warm_throughput": cost.throughput(ledgers["warm"]),
            "throughput_ratio": cost.throughput(ledgers["warm"]) / cost.throughput(ledgers["cold"]),
            "fsck_ok": fsck(cl.store, cl.policy).ok,
        })
    return rows


def hotspot_experiment(shared_depth: int = 3, files: int = 600, ops: int = 3000,
                       cfg: Optional[HarnessConfig] = None, seed: int = 0) -> MetricsReport:
    """Every operation targets files of one shared directory at ``shared_depth``.

    ``shared_depth == 0`` instead spreads operations over a generated namespace.
    Partition load counts the partitions of inode rows locked by each operation.
    """
    cfg = _det(cfg)
    cl = FileSystemCluster(cfg, num_namenodes=1, clock=SimClock())
    nn = cl.namenodes[0]
    if shared_depth <= 0:
        st = generate_namespace(cl.store, dataclasses.replace(
            cfg.namespace, target_inodes=max(files, 2000), seed=seed), cl.policy)
        fpaths, dpaths = st.file_paths, st.dir_paths
    else:
        comps = [f"p{i}" for i in range(1, shared_depth)] + ["shared-dir"]
        base = "/" + "/".join(comps)
        F.mkdirs(nn, base)
        fpaths = [f"{base}/file-{i:05d}" for i in range(files)]
        for p in fpaths:
            F.create_file(nn, p)
        dpaths = [base]
    mix = WorkloadMix({"GetBlockLocations": 0.7, "Stat": 0.2, "SetReplication": 0.1},
                      dir_ratios={})
    rep = run_benchmark(cl, fpaths, dpaths, mix=mix, ops=ops, workers=1, num_clients=4,
                        seed=seed)
    loads = rep.partition_load
    total = sum(loads.values())
    rep.extra.update({
        "shared_depth": shared_depth,
        "max_partition_share": max(loads.values()) / total if total else 0.0,
        "max_mean_ratio": rep.partition_skew(cfg.cluster.partitions_per_table),
        "fsck_ok": fsck(cl.store, cl.policy).ok,
    })
    return rep


def failover_experiment(kill_at: Iterable[int] = (1000,), ops: int = 3000,
                        cfg: Optional[HarnessConfig] = None, *, num_namenodes: int = 4,
                        workers: int = 1, policy: str = "random", restart_at: Iterable[int] = (),
                        seed: int = 0, inodes: int = 2000) -> MetricsReport:
    """Kill namenodes round-robin at the given operation indices while clients run."""
    cfg = cfg or HarnessConfig()
    if workers == 1:
        cfg = _det(cfg)
    cl = FileSystemCluster(cfg, num_namenodes=num_namenodes)
    st = generate_namespace(cl.store, dataclasses.replace(cfg.namespace, target_inodes=inodes,
                                                          seed=seed), cl.policy)
    victims = iter(list(cl.namenodes))
    events = {}
    killed = []

    def kill():
        nn = next(victims)
        cl.kill_namenode(nn)
        killed.append(nn.id)

    def restart():
        cl.add_namenode()

    for i in kill_at:
        events[i] = kill
    for i in restart_at:
        events[i] = restart
    cl.start_heartbeats()
    try:
        rep = run_benchmark(cl, st.file_paths, st.dir_paths, mix=cfg.mix, ops=ops,
                            workers=workers, num_clients=cfg.bench.num_clients, policy=policy,
                            seed=seed, events=events, timeline_every=max(1, ops // 20))
    finally:
        cl.close()
    if cl.clock.simulated:
        # let the dead namenodes' heartbeats lapse
        cl.tick(cfg.namenode.liveness_window + cfg.namenode.beat_ms)
    else:
        waited = 0.0
        limit = cfg.namenode.liveness_window + 2 * cfg.namenode.beat_ms
        while set(killed) & set(cl.alive_ids()) and waited < limit:
            cl.clock.sleep(cfg.namenode.beat_ms / 5)
            waited += cfg.namenode.beat_ms / 5
    alive = set(cl.alive_ids())
    rep.extra.update({"killed": killed, "alive": sorted(alive),
                      "fsck_ok": fsck(cl.store, cl.policy, alive).ok})
    return rep


def crash_delete_experiment(inodes: int = 5000, crash_after: int = 1, *,
                            cfg: Optional[HarnessConfig] = None, seed: int = 0) -> dict:
    """Kill the namenode running a subtree delete after ``crash_after`` batches,
    then re-issue the delete from a survivor."""
    from .. import subtree
    from ..errors import NamenodeDown
    cfg = _det(cfg)
    cl = FileSystemCluster(cfg, num_namenodes=2, clock=SimClock())
    a, b = cl.namenodes
    F.mkdirs(a, "/victim/tree")
    generate_namespace(cl.store, dataclasses.replace(cfg.namespace, target_inodes=inodes,
                                                     base="/victim/tree", seed=seed), cl.policy)
    crashed = False
    try:
        subtree.run_subtree_op(a, "delete", "/victim/tree", crash_after=crash_after)
    except NamenodeDown:
        crashed = True
    after_crash = fsck(cl.store, cl.policy)
    survivors = len(cl.store.rows("inode"))
    F.delete(b, "/victim/tree", recursive=True)
    final = fsck(cl.store, cl.policy)
    gone = True
    try:
        F.stat(b, "/victim/tree")
        gone = False
    except Exception:
        pass
    return {"crash_after": crash_after, "crashed": crashed, "inodes_after_crash": survivors,
            "fsck_after_crash": after_crash.violations, "fsck_final": final.violations,
            "deleted": gone,
            "remaining_inodes": len(cl.store.rows("inode"))}
