"""The twelve acceptance criteria.  Each test prints one PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v -s`` or
``python3 tests/test_acceptance.py``.
"""
import dataclasses
import functools
import itertools
import random
import sys
import threading
import time

import pytest

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from conftest import deep_dir, sim_cluster  # noqa: E402

from ndbfs import fsops as F  # noqa: E402
from ndbfs import schema as S  # noqa: E402
from ndbfs.errors import (AlreadyExists, FsError, NdbfsError, NotFound, RetriesExhausted,  # noqa: E402
                          Timeout, Unavailable)
from ndbfs.fsops import OpKind  # noqa: E402
from ndbfs.harness import experiments as X  # noqa: E402
from ndbfs.harness.cluster import FileSystemCluster  # noqa: E402
from ndbfs.harness.config import HarnessConfig  # noqa: E402
from ndbfs.harness.fsck import fsck  # noqa: E402
from ndbfs.harness.metrics import GIB, estimate_footprint  # noqa: E402
from ndbfs.harness.workload import DEFAULT_MIX, WorkloadMix, realized_frequencies  # noqa: E402
from ndbfs.ndbsim import ClusterConfig, WallClock  # noqa: E402
from ndbfs.nncore import is_ancestor_path, split_path  # noqa: E402
from ndbfs.subtree import SubtreeConfig, run_subtree_op  # noqa: E402

RESULTS: list = []


def criterion(num: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*a, **kw):
            t0 = time.perf_counter()
            try:
                detail = fn(*a, **kw)
            except BaseException as e:
                line = f"FAIL C{num:<2} {title}: {type(e).__name__}: {str(e)[:200]}"
                RESULTS.append(line)
                print(line)
                raise
            line = f"PASS C{num:<2} {title} ({time.perf_counter() - t0:.2f}s){': ' + detail if detail else ''}"
            RESULTS.append(line)
            print(line)
        return run
    return wrap


# ----------------------------------------------------------------------- C1-C3


@criterion(1, "create round trips: cold 26 at depth 10, warm 11 at every depth")
def test_c01_create_golden():
    t0 = time.perf_counter()
    rows = X.depth_experiment(OpKind.CREATE_FILE, (4, 6, 8, 10, 12))
    elapsed = time.perf_counter() - t0
    d10 = next(r for r in rows if r["depth"] == 10)
    nz = {k: v for k, v in d10["cold"].items() if v}
    assert nz == {"PK_rc": 17, "PK_w": 5, "PPIS": 2, "Batch": 2}, nz
    assert d10["cold_total"] == 26
    assert [r["warm_total"] for r in rows] == [11] * 5
    assert elapsed < 1.0, elapsed
    return f"cold={d10['cold_total']} warm={[r['warm_total'] for r in rows]}"


@criterion(2, "create cache savings 15/26")
def test_c02_create_savings():
    (row,) = X.depth_experiment(OpKind.CREATE_FILE, (10,))
    assert row["cold_total"] - row["warm_total"] == 15
    assert row["savings"] == pytest.approx(15 / 26, abs=1e-12)
    assert F.savings_fraction(OpKind.CREATE_FILE, 10) == pytest.approx(0.5769, abs=1e-4)
    assert round(row["savings"] * 100) == 58
    return f"savings={row['savings']:.4f}"


@criterion(3, "read savings: warm depth-independent, cold slope 1, within 0.68 +- 0.15")
def test_c03_read_savings():
    depths = (4, 6, 8, 10, 12)
    rows = X.depth_experiment(OpKind.GET_BLOCK_LOCATIONS, depths)
    warm = [r["warm"] for r in rows]
    assert all(w == warm[0] for w in warm)
    for a, b in zip(rows, rows[1:]):
        step = b["depth"] - a["depth"]
        diff = {k: b["cold"][k] - a["cold"][k] for k in a["cold"]}
        assert diff == {**{k: 0 for k in diff}, "PK_rc": step}, diff
    d10 = next(r for r in rows if r["depth"] == 10)
    assert abs(d10["savings"] - 0.68) <= 0.15
    return f"cold={d10['cold_total']} warm={d10['warm_total']} savings={d10['savings']:.3f}"


# -------------------------------------------------------------------------- C4


@criterion(4, "1e5 sampled ops match the default mix within 1 pp")
def test_c04_workload_fidelity():
    t0 = time.perf_counter()
    got = realized_frequencies(WorkloadMix(), 100_000, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(abs(got.get(k, 0.0) - p) for k, p in DEFAULT_MIX.items())
    assert worst <= 0.01, worst
    assert elapsed < 30
    return f"max deviation {worst * 100:.3f} pp"


# -------------------------------------------------------------------------- C5


@criterion(5, "node-group fault tolerance with 12 datanodes and R=2")
def test_c05_node_groups():
    t0 = time.perf_counter()
    cl = sim_cluster(1, cluster=ClusterConfig(num_datanodes=12, replication_degree=2))
    st, nn = cl.store, cl.namenodes[0]
    assert st.num_node_groups == 6
    files = [f"/f{i}" for i in range(64)]
    for p in files:
        F.create_file(nn, p)
    group_of = {p: st.group_of_partition(st.row_partition(S.INODE, (S.ROOT_ID, p[1:]))).group_id
                for p in files}
    assert set(group_of.values()) == set(range(6))
    members = [g.member_datanode_ids for g in st.node_groups]

    checked = 0
    for choice in itertools.product(range(3), repeat=6):
        killed = [members[g][c - 1] for g, c in enumerate(choice) if c]
        for dn in killed:
            st.kill_datanode(dn)
        F.create_file(nn, "/probe")
        assert len(F.list_dir(nn, "/")) == 65  # scans every inode partition
        F.delete(nn, "/probe")
        for dn in killed:
            st.revive_datanode(dn)
        checked += 1
    assert checked == 3 ** 6

    root_group = st.group_of_partition(st.row_partition(S.INODE, (0, ""))).group_id
    for g, pair in enumerate(members):
        for dn in pair:
            st.kill_datanode(dn)
        for p in files:
            if group_of[p] == g:
                with pytest.raises(Unavailable):
                    F.stat(nn, p)
            elif root_group != g:
                F.stat(nn, p)
        for dn in pair:
            st.revive_datanode(dn)
    assert fsck(st, cl.policy).ok
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, elapsed
    return f"{checked} surviving kill-sets available in {elapsed:.2f}s"


# -------------------------------------------------------------------------- C6


class Model:
    """Reference namespace: path -> (is_dir, replication)."""

    def __init__(self, entries=None):
        self.n = dict(entries or {})

    def key(self):
        return frozenset(self.n.items())

    def _parent_ok(self, path):
        comps = split_path(path)
        for k in range(1, len(comps)):
            prefix = "/" + "/".join(comps[:k])
            if prefix not in self.n:
                raise NotFound(prefix)
            if not self.n[prefix][0]:
                raise FsError(prefix)

    def apply(self, op):
        kind, *args = op
        if kind in ("create", "mkdir"):
            (p,) = args
            self._parent_ok(p)
            if p in self.n:
                raise AlreadyExists(p)
            self.n[p] = (kind == "mkdir", 0 if kind == "mkdir" else 3)
        elif kind == "delete":
            (p,) = args
            self._parent_ok(p)
            if p not in self.n:
                raise NotFound(p)
            for q in [q for q in self.n if q == p or is_ancestor_path(p, q)]:
                del self.n[q]
        elif kind == "move":
            s, d = args
            if s == d or is_ancestor_path(s, d):
                raise FsError("into itself")
            self._parent_ok(s)
            if s not in self.n:
                raise NotFound(s)
            self._parent_ok(d)
            if d in self.n:
                raise AlreadyExists(d)
            for q in [q for q in self.n if q == s or is_ancestor_path(s, q)]:
                self.n[d + q[len(s):]] = self.n.pop(q)
        elif kind == "setrep":
            p, v = args
            self._parent_ok(p)
            if p not in self.n:
                raise NotFound(p)
            if self.n[p][0]:
                raise FsError(p)
            self.n[p] = (False, v)
        elif kind == "stat":
            (p,) = args
            self._parent_ok(p)
            if p not in self.n:
                raise NotFound(p)
            return self.n[p]
        return None


def outcome(fn):
    try:
        return ("ok", fn())
    except FsError:
        return ("err", None)


def run_real(nn, op):
    kind, *args = op
    if kind == "create":
        return lambda: (F.create_file(nn, args[0]), None)[1]
    if kind == "mkdir":
        return lambda: (F.mkdir(nn, args[0]), None)[1]
    if kind == "delete":
        return lambda: F.delete(nn, args[0], recursive=True)
    if kind == "move":
        return lambda: F.move(nn, args[0], args[1])
    if kind == "setrep":
        return lambda: F.set_attr(nn, args[0], "replication", args[1])

    def stat():
        st = F.stat(nn, args[0])
        return (st["is_dir"], st["replication"])
    return stat


def real_state(store):
    rows = {r["id"]: r for r in store.rows(S.INODE)}

    def path(r):
        parts = []
        while r["id"] != S.ROOT_ID:
            parts.append(r["name"])
            r = rows[r["parent_id"]]
        return "/" + "/".join(reversed(parts))

    return frozenset((path(r), (r["is_dir"], r["replication"]))
                     for r in rows.values() if r["id"] != S.ROOT_ID)


def serializable(init, ops, observed):
    """Is there an order of ``ops`` reproducing ``observed`` outcomes and a final state?"""
    frontier = {(0, init.key()): init}
    n = len(ops)
    for _ in range(n):
        nxt = {}
        for (mask, _), m in frontier.items():
            for i in range(n):
                if mask & (1 << i):
                    continue
                m2 = Model(m.n)
                out = outcome(lambda: m2.apply(ops[i]))
                if out != observed[i]:
                    continue
                nxt.setdefault((mask | (1 << i), m2.key()), m2)
        frontier = nxt
    return {k for _, k in frontier}


NAMES = ("a", "b")


def random_path(rng, max_depth=3):
    return "/" + "/".join(rng.choice(NAMES) for _ in range(rng.randint(1, max_depth)))


def random_op(rng, known):
    def pick():
        # mostly existing paths or their children so that ops tend to succeed
        if known and rng.random() < 0.7:
            base = rng.choice(known)
            return base if rng.random() < 0.5 else f"{base}/{rng.choice(NAMES)}"
        return random_path(rng, 2)

    kind = rng.choices(("create", "mkdir", "delete", "move", "setrep", "stat"),
                       (3, 3, 2, 2, 1, 1))[0]
    if kind == "move":
        return (kind, pick(), pick())
    if kind == "setrep":
        return (kind, pick(), rng.randint(1, 5))
    return (kind, pick())


def random_history(seed):
    rng = random.Random(seed)
    init = Model()
    for _ in range(rng.randint(2, 8)):
        op = (rng.choice(("mkdir", "mkdir", "create")), random_path(rng, 2))
        outcome(lambda: init.apply(op))
    known = sorted(init.n)
    return init, [random_op(rng, known) for _ in range(rng.randint(2, 8))], rng.randint(1, 4)


def materialize(cl, init):
    nn = cl.namenodes[0]
    for p, (is_dir, _) in sorted(init.n.items(), key=lambda kv: kv[0].count("/")):
        (F.mkdir if is_dir else F.create_file)(nn, p)


def test_c06_model_agrees_with_serial_execution():
    """Oracle self-check: serial runs on the real system match the model exactly."""
    for seed in range(150):
        init, ops, _ = random_history(10_000 + seed)
        cl = sim_cluster(1)
        materialize(cl, init)
        assert real_state(cl.store) == init.key()
        m = Model(init.n)
        nn = cl.namenodes[0]
        for op in ops:
            assert outcome(run_real(nn, op)) == outcome(lambda: m.apply(op)), (seed, op)
        assert real_state(cl.store) == m.key(), seed


@criterion(6, "500 concurrent histories are serializable")
def test_c06_serial_equivalence():
    t0 = time.perf_counter()
    cfg = HarnessConfig()
    aborted = 0
    for seed in range(500):
        init, ops, workers = random_history(seed)
        cl = FileSystemCluster(cfg, num_namenodes=workers, clock=WallClock(0.05))
        materialize(cl, init)
        observed = [None] * len(ops)
        barrier = threading.Barrier(workers)

        def work(w):
            nn = cl.namenodes[w]
            barrier.wait()
            for i in range(w, len(ops), workers):
                try:
                    observed[i] = outcome(run_real(nn, ops[i]))
                except (RetriesExhausted, Timeout):
                    observed[i] = "aborted"

        ts = [threading.Thread(target=work, args=(w,)) for w in range(workers)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        done = [i for i, o in enumerate(observed) if o != "aborted"]
        aborted += len(ops) - len(done)
        finals = serializable(init, [ops[i] for i in done], [observed[i] for i in done])
        final = real_state(cl.store)
        assert final in finals, (seed, ops, observed)
        assert fsck(cl.store, cl.policy).ok, seed
        assert cl.store.rows(S.SUBTREE_OPS) == []
    elapsed = time.perf_counter() - t0
    assert elapsed < 300
    return f"0 counterexamples, {aborted} aborted ops excluded"


# -------------------------------------------------------------------------- C7


@criterion(7, "10k contended inode ops, zero Timeout aborts")
def test_c07_deadlock_freedom():
    cfg = HarnessConfig()
    cfg = dataclasses.replace(cfg, cluster=dataclasses.replace(cfg.cluster,
                                                               lock_wait_timeout=120_000))
    cl = FileSystemCluster(cfg, num_namenodes=4, clock=WallClock())
    dirs = [f"/h{i}" for i in range(4)] + ["/deep/x/y"]
    for d in dirs:
        F.mkdirs(cl.namenodes[0], d)
    paths = [f"{d}/p{j}" for d in dirs for j in range(4)]
    assert len(paths) == 20
    timeouts = [0]
    real_acquire = cl.store._acquire

    def counting(tx, key, mode):
        try:
            return real_acquire(tx, key, mode)
        except Timeout:
            timeouts[0] += 1
            raise

    cl.store._acquire = counting
    per_worker, workers = 2500, 4
    bad = []

    def work(w):
        rng = random.Random(w)
        nn = cl.namenodes[w]
        for _ in range(per_worker):
            p = rng.choice(paths)
            kind = rng.random()
            try:
                if kind < 0.25:
                    F.create_file(nn, p)
                elif kind < 0.45:
                    F.delete(nn, p)
                elif kind < 0.65:
                    F.move(nn, p, rng.choice(paths))
                elif kind < 0.8:
                    F.set_attr(nn, p, "replication", rng.randint(1, 3))
                elif kind < 0.9:
                    F.get_block_locations(nn, p)
                else:
                    F.stat(nn, p)
            except (NotFound, AlreadyExists):
                pass
            except FsError as e:
                if type(e).__name__ != "InvalidMove":
                    bad.append(repr(e))
            except NdbfsError as e:
                bad.append(repr(e))

    ts = [threading.Thread(target=work, args=(w,)) for w in range(workers)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert timeouts[0] == 0, timeouts[0]
    assert not bad, bad[:5]
    assert fsck(cl.store, cl.policy).ok
    return f"{per_worker * workers} ops, 0 timeouts"


# -------------------------------------------------------------------------- C8


@criterion(8, "subtree delete crash consistency on a 5k-inode tree")
def test_c08_crash_consistency():
    ks = range(0, 5)
    before = None
    for k in ks:
        r = X.crash_delete_experiment(5000, crash_after=k)
        assert r["crashed"], k
        assert r["fsck_after_crash"] == [], r["fsck_after_crash"][:5]
        if before is None:
            before = r["inodes_after_crash"]
        assert r["inodes_after_crash"] == before - 1000 * k
        assert r["deleted"], k
        assert r["fsck_final"] == [], r["fsck_final"][:5]
        assert r["remaining_inodes"] == 2
    return f"k in {list(ks)}: zero violations"


# -------------------------------------------------------------------------- C9


@criterion(9, "subtree and inode ops: no half-applied views, roots form an antichain")
def test_c09_lock_compatibility():
    rounds = 12
    for seed in range(rounds):
        _c9_round(seed)
    return f"{rounds} randomized rounds"


def _c9_round(seed):
    cfg = dataclasses.replace(HarnessConfig(), subtree=SubtreeConfig(delete_batch_size=2,
                                                                     backoff_base_ms=20))
    cl = FileSystemCluster(cfg, num_namenodes=4, clock=WallClock(0.05))
    nn0 = cl.namenodes[0]
    full = {"f0", "f1", "f2", "f3", "s"}
    inner = {"g0", "g1", "g2"}
    for i in range(5):
        F.mkdirs(nn0, f"/t/d{i}/s")
        for n in sorted(full - {"s"}):
            F.create_file(nn0, f"/t/d{i}/{n}")
        for n in sorted(inner):
            F.create_file(nn0, f"/t/d{i}/s/{n}")
    F.mkdir(nn0, "/u")

    violations = []
    real_commit = cl.store.commit

    def checked_commit(tx):
        with cl.store._cond:
            real_commit(tx)
            roots = [r["root_path"] for r in cl.store.rows(S.SUBTREE_OPS)]
            for a, b in itertools.permutations(roots, 2):
                if a == b or is_ancestor_path(a, b):
                    violations.append(f"overlapping subtree roots {a} {b}")

    cl.store.commit = checked_commit
    stop = threading.Event()

    def subtree_worker(w):
        rng = random.Random(seed * 10 + w)
        nn = cl.namenodes[w]
        for step in range(10):
            i = rng.randrange(5)
            choice = rng.random()
            try:
                if choice < 0.35:
                    F.delete(nn, f"/t/d{i}", recursive=True)
                elif choice < 0.6:
                    F.move(nn, f"/t/d{i}", f"/u/m{w}-{step}")
                elif choice < 0.8:
                    run_subtree_op(nn, "chmod", rng.choice(["/t", f"/t/d{i}", "/u"]), value=0o750)
                else:
                    F.delete(nn, rng.choice(["/u", f"/t/d{i}/s"]), recursive=True)
                    F.mkdirs(nn, "/u")
            except (FsError, Timeout):
                pass

    def inode_worker(w):
        rng = random.Random(seed * 10 + w)
        nn = cl.namenodes[w]
        while not stop.is_set():
            i = rng.randrange(5)
            target = rng.choice([f"/t/d{i}", f"/t/d{i}/s"] +
                                [f"/u/{n}" for n in _names(cl, "/u")])
            try:
                if rng.random() < 0.6:
                    names = {e["name"] for e in F.list_dir(nn, target)}
                    if target.endswith("/s") or names & inner:
                        if names != inner:
                            violations.append(f"partial view of {target}: {sorted(names)}")
                    elif names not in (full, full - {"s"}):
                        violations.append(f"partial view of {target}: {sorted(names)}")
                else:
                    F.set_attr(nn, f"{target}/f0" if not target.endswith("/s") else f"{target}/g0",
                               "replication", rng.randint(1, 3))
            except (FsError, Timeout):
                pass

    subs = [threading.Thread(target=subtree_worker, args=(w,)) for w in (0, 1)]
    inodes = [threading.Thread(target=inode_worker, args=(w,)) for w in (2, 3)]
    for t in subs + inodes:
        t.start()
    for t in subs:
        t.join()
    stop.set()
    for t in inodes:
        t.join()
    assert not violations, violations[:5]
    rep = fsck(cl.store, cl.policy)
    assert rep.ok, rep.violations[:5]
    assert cl.store.rows(S.SUBTREE_OPS) == []
    assert all(r["subtree_lock_owner"] is None for r in cl.store.rows(S.INODE))


def _names(cl, path):
    d = cl.store.peek(S.INODE, (S.ROOT_ID, path.strip("/")))
    if d is None:
        return []
    return [r["name"] for r in cl.store.rows(S.INODE) if r["parent_id"] == d["id"]]


# ------------------------------------------------------------------------- C10


@criterion(10, "namenode failover loses no client operation")
def test_c10_failover():
    det = X.failover_experiment((1000,), ops=3000, num_namenodes=4, workers=1)
    assert det.unrecovered == 0 and det.resubmissions >= 1 and det.extra["fsck_ok"]
    threaded = X.failover_experiment((1500,), ops=3000, num_namenodes=4, workers=4)
    assert threaded.unrecovered == 0 and threaded.extra["fsck_ok"]
    assert threaded.extra["killed"][0] not in threaded.extra["alive"]
    return (f"resubmitted {det.resubmissions} (sim) / {threaded.resubmissions} (threads), "
            "0 unrecovered")


# ------------------------------------------------------------------------- C11


@criterion(11, "metadata footprint: 1 GiB holds 2.3M HDFS or 0.69M files here")
def test_c11_footprint():
    _, hdfs = estimate_footprint(2.3e6, name_len=10)
    hops, _ = estimate_footprint(0.69e6, name_len=10)
    assert abs(hdfs / GIB - 1) <= 0.02 and abs(hops / GIB - 1) <= 0.02
    return f"hdfs {hdfs / GIB:.4f} GiB, ours {hops / GIB:.4f} GiB"


# ------------------------------------------------------------------------- C12


@criterion(12, "placement: deep children colocate, root children spread")
def test_c12_placement():
    cl = sim_cluster(1)
    nn = cl.namenodes[0]
    d = deep_dir(nn, 5)
    for i in range(40):
        F.create_file(nn, f"{d}/f{i}")
    F.stat(nn, d)
    assert len(F.list_dir(nn, d)) == 40
    assert F.last_result().ledger["PPIS"] == 1
    parent = F.stat(nn, d)["id"]
    parts = {cl.store.row_partition(S.INODE, (parent, f"f{i}")) for i in range(40)}
    assert len(parts) == 1
    for i in range(64):
        F.create_file(nn, f"/top{i}")
    spread = {cl.store.row_partition(S.INODE, (S.ROOT_ID, f"top{i}")) for i in range(64)}
    need = min(cl.store.config.partitions_per_table, 8)
    assert len(spread) >= need
    return f"deep dir on 1 partition, root children on {len(spread)} partitions"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
