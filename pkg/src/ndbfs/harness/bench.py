"""Client pool and the workload-driven benchmark loop."""
from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import fsops as F
from .. import schema as S
from ..errors import LEGITIMATE_FS_ERRORS, NamenodeDown, NdbfsError
from ..fsops import OpKind
from ..nncore import Namenode, parent_path
from .cluster import FileSystemCluster
from .metrics import CostModel, MetricsReport
from .workload import WorkloadMix

POLICIES = ("random", "round_robin", "sticky")


class NoNamenodeAlive(NdbfsError):
    pass


@dataclass
class Client:
    client_id: int
    pinned: Optional[Namenode] = None
    rr: int = 0
    own_files: list = field(default_factory=list)


class ClientPool:
    """Namenode selection per client, with resubmission when a namenode dies."""

    def __init__(self, cluster: FileSystemCluster, num_clients: int, policy: str = "random",
                 seed: int = 0):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        self.cluster = cluster
        self.policy = policy
        self.clients = [Client(i) for i in range(num_clients)]
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self.resubmissions = 0
        # clients learn of failures only by hitting a dead namenode
        self._view = list(cluster.alive())
        # sticky clients only re-pin to namenodes they knew at start-up
        self._known = set(map(id, self._view))
        for c in self.clients:
            if policy == "sticky":
                self._pin(c)
            c.rr = c.client_id

    def _refresh(self, failed: Optional[Namenode]) -> None:
        members = set(self.cluster.alive_ids())
        self._view = [nn for nn in self.cluster.namenodes
                      if nn is not failed and nn.id in members
                      and (nn in self._view or nn.alive)]

    def _pin(self, c: Client) -> None:
        alive = [nn for nn in self._view if id(nn) in self._known] or self._view
        if not alive:
            raise NoNamenodeAlive("no namenode is alive")
        c.pinned = self._rng.choice(alive)

    def pick(self, client: Client) -> Namenode:
        with self._lock:
            alive = self._view
            if not alive:
                self._refresh(None)
                alive = self._view
            if not alive:
                raise NoNamenodeAlive("no namenode is alive")
            if self.policy == "random":
                return self._rng.choice(alive)
            if self.policy == "round_robin":
                client.rr += 1
                return alive[client.rr % len(alive)]
            if client.pinned is None:
                self._pin(client)
            return client.pinned

    def submit(self, client: Client, fn: Callable[[Namenode], object]):
        """Run ``fn`` on a namenode chosen for ``client``; resubmit on namenode failure."""
        while True:
            nn = self.pick(client)
            try:
                return fn(nn)
            except NamenodeDown:
                with self._lock:
                    self.resubmissions += 1
                    if nn in self._view:
                        self._refresh(nn)
                    if client.pinned is nn:
                        client.pinned = None

    def load(self) -> dict:
        """Sticky clients per namenode id."""
        out: dict = {}
        for c in self.clients:
            if c.pinned is not None:
                out[c.pinned.id] = out.get(c.pinned.id, 0) + 1
        return out


class Namespace:
    """The benchmark's (possibly stale) view of existing paths."""

    def __init__(self, files, dirs):
        self.files = list(files)
        self.dirs = list(dirs)
        self._lock = threading.Lock()
        self._n = 0

    def fresh_name(self, tag: str) -> str:
        with self._lock:
            self._n += 1
            return f"{tag}-{self._n}"

    def pick(self, rng: random.Random, want_dir: bool) -> Optional[str]:
        with self._lock:
            pool = self.dirs if want_dir else self.files
            if not pool:
                pool = self.files or self.dirs
            return rng.choice(pool) if pool else None

    def add(self, path: str, is_dir: bool) -> None:
        with self._lock:
            (self.dirs if is_dir else self.files).append(path)

    def remove_tree(self, path: str) -> None:
        pre = path + "/"
        with self._lock:
            self.files = [p for p in self.files if p != path and not p.startswith(pre)]
            self.dirs = [p for p in self.dirs if p != path and not p.startswith(pre)]

    def rename_tree(self, src: str, dst: str) -> None:
        pre = src + "/"

        def fix(p):
            if p == src:
                return dst
            if p.startswith(pre):
                return dst + p[len(src):]
            return p
        with self._lock:
            self.files = [fix(p) for p in self.files]
            self.dirs = [fix(p) for p in self.dirs]


def _sibling(path: str, name: str) -> str:
    parent = parent_path(path)
    return (parent.rstrip("/") or "") + "/" + name


def _child(path: str, name: str) -> str:
    return (path.rstrip("/") or "") + "/" + name


def plan_op(kind: OpKind, rng: random.Random, mix: WorkloadMix, ns: Namespace, client: Client):
    """Pick targets for one operation.  Returns (callable on a namenode, bookkeeping)."""
    want_dir = mix.targets_dir(kind, rng)
    target = ns.pick(rng, want_dir)
    if target is None:
        target = "/"
    user = "client-%d" % client.client_id
    if kind is OpKind.GET_BLOCK_LOCATIONS:
        return (lambda nn: F.get_block_locations(nn, target)), None
    if kind is OpKind.STAT:
        return (lambda nn: F.stat(nn, target)), None
    if kind is OpKind.LIST_DIR:
        return (lambda nn: F.list_dir(nn, target)), None
    if kind is OpKind.CONTENT_SUMMARY:
        return (lambda nn: F.content_summary(nn, target)), None
    if kind is OpKind.APPEND:
        return (lambda nn: F.append(nn, target)), None
    if kind is OpKind.CREATE_FILE:
        d = ns.pick(rng, True) or "/"
        p = _child(d, ns.fresh_name("f"))
        return (lambda nn: F.create_file(nn, p, client=user)), ("created", p, client)
    if kind is OpKind.MKDIRS:
        d = ns.pick(rng, True) or "/"
        p = _child(d, ns.fresh_name("d"))
        return (lambda nn: F.mkdirs(nn, p)), ("mkdir", p)
    if kind is OpKind.ADD_BLOCK:
        if client.own_files:
            p = rng.choice(client.own_files)
        else:
            p = target
        return (lambda nn: F.add_block(nn, p, user)), None
    if kind is OpKind.SET_REPLICATION:
        return (lambda nn: F.set_attr(nn, target, "replication", rng.choice((2, 3)))), None
    if kind is OpKind.SET_PERMS:
        mode = rng.choice((0o755, 0o775, 0o750))
        return (lambda nn: F.set_attr(nn, target, "perms", mode)), None
    if kind is OpKind.SET_OWNER:
        return (lambda nn: F.set_attr(nn, target, "owner", S.SUPERUSER)), None
    if kind is OpKind.DELETE_FILE:
        if target == "/":
            return (lambda nn: F.stat(nn, "/")), None
        return (lambda nn: F.delete(nn, target, recursive=True)), ("deleted", target)
    if kind is OpKind.MOVE_FILE:
        if target == "/":
            return (lambda nn: F.stat(nn, "/")), None
        dst = _sibling(target, ns.fresh_name("m"))
        return (lambda nn: F.move(nn, target, dst)), ("moved", target, dst)
    raise ValueError(kind)


def _book(ns: Namespace, note, ok: bool) -> None:
    if note is None or not ok:
        return
    if note[0] == "created":
        ns.add(note[1], False)
        note[2].own_files.append(note[1])
    elif note[0] == "mkdir":
        ns.add(note[1], True)
    elif note[0] == "deleted":
        ns.remove_tree(note[1])
    elif note[0] == "moved":
        ns.rename_tree(note[1], note[2])


def _inode_partitions(res) -> list:
    if res is None:
        return []
    return [pid for (table, pid) in res.partitions if table == S.INODE]


def run_benchmark(cluster: FileSystemCluster, files, dirs, *, mix: Optional[WorkloadMix] = None,
                  ops: int = 1000, workers: int = 1, num_clients: int = 8,
                  policy: str = "random", seed: int = 0, cost: Optional[CostModel] = None,
                  events: Optional[dict] = None, timeline_every: int = 0,
                  pool: Optional[ClientPool] = None) -> MetricsReport:
    """Run ``ops`` operations drawn from ``mix``.

    ``events`` maps an operation index to a callable run once when that many
    operations have been started (failure injection).  With ``workers == 1``
    and a simulated clock the report is a pure function of the seed.
    """
    mix = mix or cluster.cfg.mix
    cost = cost or cluster.cfg.cost
    report = MetricsReport()
    pool = pool or ClientPool(cluster, num_clients, policy, seed)
    ns = Namespace(files, dirs)
    events = dict(events or {})
    counter = [0]
    lock = threading.Lock()
    done = [0]
    interval_ok = [0]

    def next_index():
        with lock:
            i = counter[0]
            if i >= ops:
                return None
            counter[0] += 1
            ev = events.pop(i, None)
        if ev is not None:
            ev()
            with lock:
                report.timeline.append({"op": i, "event": getattr(ev, "__name__", "event"),
                                        "t": cluster.clock.now()})
        return i

    def worker(w: int):
        rng = random.Random(seed * 1_000_003 + w)
        mine = [c for c in pool.clients if c.client_id % workers == w] or pool.clients
        while True:
            i = next_index()
            if i is None:
                return
            client = rng.choice(mine)
            kind = mix.sample(rng)
            fn, note = plan_op(kind, rng, mix, ns, client)
            F.reset_last_result()
            err = None
            try:
                pool.submit(client, fn)
            except LEGITIMATE_FS_ERRORS as e:
                err = type(e).__name__
            except NdbfsError as e:
                err = type(e).__name__
                with lock:
                    report.unrecovered += 1
            res = F.last_result()
            _book(ns, note, err is None)
            with lock:
                report.record(kind.value, res.ledger if res is not None else None, cost, err)
                for pid in _inode_partitions(res):
                    report.partition_load[pid] = report.partition_load.get(pid, 0) + 1
                done[0] += 1
                if err is None:
                    interval_ok[0] += 1
                if timeline_every and done[0] % timeline_every == 0:
                    report.timeline.append({"op": done[0], "ok": interval_ok[0],
                                            "t": cluster.clock.now()})
                    interval_ok[0] = 0

    t0 = time.perf_counter()
    if workers == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    report.wall_seconds = time.perf_counter() - t0
    report.resubmissions = pool.resubmissions
    report.extra["sticky_load"] = {str(k): v for k, v in sorted(pool.load().items())}
    return report.finish()
