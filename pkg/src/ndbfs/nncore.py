"""Stateless namenode machinery.

A namenode owns nothing but an inode hint cache.  Every file-system operation
runs as one store transaction built from an :class:`OpTemplate`:

* lock phase: resolve the path (one batch when every directory prefix is in
  the hint cache, one read per component otherwise), lock the last
  component(s) in the global total order, then read file-related metadata
  with partition pruned scans;
* execute phase: the template body works on a :class:`PerTxSnapshot`;
* update phase: buffered changes are handed to the store and committed.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Optional

from . import schema as S
from .errors import (AlreadyExists, InvalidPath, NamenodeDown, NotADirectory,
                     NotFound, PermissionDenied, RetriesExhausted, SubtreeLocked,
                     Timeout, Unavailable)
from .ndbsim import EXCL, RC, SHARED, LockMode, RoundTripLedger, StoreCluster

# ------------------------------------------------------------------- paths


def split_path(path: str) -> list:
    if not isinstance(path, str) or not path.startswith("/"):
        raise InvalidPath(f"not an absolute path: {path!r}")
    if path == "/":
        return []
    comps = path[1:].split("/")
    if any(c in ("", ".", "..") for c in comps):
        raise InvalidPath(f"path is not normalized: {path!r}")
    return comps


def join_path(comps) -> str:
    return "/" + "/".join(comps)


def parent_path(path: str) -> str:
    comps = split_path(path)
    return join_path(comps[:-1])


def is_ancestor_path(a: str, b: str) -> bool:
    """True when ``a`` is a proper ancestor of ``b``."""
    if a == b:
        return False
    return a == "/" or b.startswith(a + "/")


def total_order_key(comps) -> tuple:
    """Root-down, left-ordered position of a path in the lock order."""
    return (len(comps), tuple(comps))


# ----------------------------------------------------------------- caches


class HintEntry(NamedTuple):
    id: int
    parent_id: int
    name: str
    partition_key: Any
    depth: int
    hashed_children: bool = False


def hint_from_row(row: dict, depth: int) -> HintEntry:
    return HintEntry(row["id"], row["parent_id"], row["name"], row["partition_key"], depth,
                     row["hashed_children"])


class InodeHintCache:
    """LRU map from absolute directory path to the inode's primary-key material."""

    def __init__(self, capacity: int = 100_000):
        self.capacity = capacity
        self._d: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, path: str) -> Optional[HintEntry]:
        with self._lock:
            e = self._d.get(path)
            if e is None:
                self.misses += 1
                return None
            self._d.move_to_end(path)
            self.hits += 1
            return e

    def put(self, path: str, entry: HintEntry) -> None:
        with self._lock:
            self._d[path] = entry
            self._d.move_to_end(path)
            while len(self._d) > self.capacity:
                self._d.popitem(last=False)

    def invalidate(self, path: str) -> None:
        """Drop ``path`` and everything cached below it."""
        with self._lock:
            for p in [p for p in self._d if p == path or is_ancestor_path(path, p)]:
                del self._d[p]

    def clear(self) -> None:
        with self._lock:
            self._d.clear()

    def __len__(self):
        return len(self._d)

    def __contains__(self, path):
        return path in self._d


def resolve_with_hints(cache: InodeHintCache, path: str) -> Optional[list]:
    """Primary keys of every component up to the penultimate one, or None on any miss."""
    comps = split_path(path)
    pks = []
    for i in range(len(comps) - 1):
        e = cache.get(join_path(comps[:i + 1]))
        if e is None:
            return None
        pks.append((e.parent_id, e.name))
    return pks


_TOMBSTONE = object()


class PerTxSnapshot:
    """Read-your-writes view over the rows a transaction has read."""

    def __init__(self):
        self._rows: dict = {}
        self._dirty: OrderedDict = OrderedDict()

    def load(self, table: str, pk: tuple, row: Optional[dict]) -> None:
        key = (table, tuple(pk))
        if key not in self._dirty:
            self._rows[key] = _TOMBSTONE if row is None else row

    def has(self, table: str, pk: tuple) -> bool:
        return (table, tuple(pk)) in self._rows

    def get(self, table: str, pk: tuple) -> Optional[dict]:
        v = self._rows[(table, tuple(pk))]
        return None if v is _TOMBSTONE else v

    def put(self, table: str, row: dict, covered_by: Optional[tuple] = None) -> None:
        pk = S_TABLES[table].pk_of(row)
        self._rows[(table, pk)] = row
        self._dirty[(table, pk)] = (row, "upsert", covered_by)

    def delete(self, table: str, row: dict, covered_by: Optional[tuple] = None) -> None:
        pk = S_TABLES[table].pk_of(row)
        self._rows[(table, pk)] = _TOMBSTONE
        self._dirty[(table, pk)] = (row, "delete", covered_by)

    def dirty_count(self) -> int:
        return len(self._dirty)

    def flush(self, store: StoreCluster, tx) -> None:
        for (table, _), (row, kind, cov) in self._dirty.items():
            store.write(tx, table, row, kind, covered_by=cov)

    def clear(self) -> None:
        self._rows.clear()
        self._dirty.clear()


S_TABLES = {t.name: t for t in S.TABLES}

# ------------------------------------------------------------- templates


@dataclass(frozen=True)
class User:
    name: str = S.SUPERUSER
    groups: tuple = (S.SUPERGROUP,)

    @property
    def is_super(self) -> bool:
        return self.name == S.SUPERUSER


SUPER = User()

_PERM_BITS = {"r": 4, "w": 2, "x": 1}


def has_access(user: User, row: dict, want: str) -> bool:
    if user.is_super:
        return True
    bits = _PERM_BITS[want]
    perms = row["perms"]
    if user.name == row["owner"]:
        return bool((perms >> 6) & bits)
    if row["group"] in user.groups:
        return bool((perms >> 3) & bits)
    return bool(perms & bits)


def check_access(user: User, row: dict, want: str, path: str = "") -> None:
    if not has_access(user, row, want):
        raise PermissionDenied(f"{user.name} lacks {want} on {path or row['name']!r}")


@dataclass(frozen=True)
class LockTarget:
    path_index: int
    which: str                    # "last" or "parent"
    mode: LockMode
    expect: str = "exists"        # "exists", "absent" or "any"


@dataclass
class OpTemplate:
    kind: str
    paths: list
    targets: list
    body: Callable
    user: User = SUPER
    mutating: bool = False
    probe_path: Optional[int] = None       # RC duplicate-name probe of that path's last component
    extra_locks: tuple = ()                # id-generator kinds locked with the targets
    related: Optional[Callable] = None     # ctx -> [(table, partition value, mode)]
    miss_surcharge: int = 0                # calibrated extra RC reads on the hint-miss path
    subtree_root: Optional[int] = None     # inode whose subtree flag this namenode owns


@dataclass
class OpResult:
    value: Any
    ledger: RoundTripLedger
    attempts: int = 1
    cache_hit: bool = False
    partitions: tuple = ()       # (table, partition) of every row locked by a PK read


class _StaleHint(Exception):
    pass


class _DeadSubtreeLock(Exception):
    def __init__(self, row):
        super().__init__(row["id"])
        self.row = row


class _ResolvedPath:
    def __init__(self, path: str, root: dict):
        self.path = path
        self.comps = split_path(path)
        self.chain = [root]      # root .. parent of the last component
        self.last: Optional[dict] = None

    @property
    def depth(self) -> int:
        return len(self.comps)

    @property
    def parent(self) -> dict:
        return self.chain[-1]

    def last_pk(self) -> tuple:
        return (self.parent["id"], self.comps[-1])

    def prefix(self, i: int) -> str:
        return join_path(self.comps[:i])


class OpContext:
    """What a template body sees: resolved paths, the snapshot and helpers."""

    def __init__(self, nn: "Namenode", tx, template: OpTemplate):
        self.nn = nn
        self.tx = tx
        self.template = template
        self.store = nn.store
        self.policy = nn.policy
        self.user = template.user
        self.snapshot = PerTxSnapshot()
        self.resolved = [_ResolvedPath(p, nn.root) for p in template.paths]
        self.related: dict = {}
        self.subtree_root = template.subtree_root

    def last(self, i: int = 0) -> Optional[dict]:
        r = self.resolved[i]
        if r.depth == 0:
            return r.chain[0]
        return self.snapshot.get(S.INODE, r.last_pk())

    def parent(self, i: int = 0) -> dict:
        r = self.resolved[i]
        if r.depth == 1:
            return r.chain[0]
        return self.snapshot.get(S.INODE, (r.parent["parent_id"], r.parent["name"]))

    def chain(self, i: int = 0) -> list:
        return self.resolved[i].chain

    def path(self, i: int = 0) -> str:
        return self.resolved[i].path

    def depth(self, i: int = 0) -> int:
        return self.resolved[i].depth

    def new_id(self, kind: str) -> int:
        row = self.snapshot.get(S.IDGEN, (kind,))
        value = row["next"]
        self.snapshot.put(S.IDGEN, {"kind": kind, "next": value + 1})
        return value

    def check_traverse(self, i: int = 0) -> None:
        r = self.resolved[i]
        for k, row in enumerate(r.chain):
            check_access(self.user, row, "x", r.prefix(k))

    def nearest_quota_row(self, i: int = 0) -> dict:
        for row in reversed(self.resolved[i].chain):
            if row["has_quota"]:
                return row
        return self.resolved[i].chain[0]

    def related_rows(self, table: str, value) -> list:
        rows = self.related.get((table, value), [])
        out = []
        for r in rows:
            cur = self.snapshot.get(table, S_TABLES[table].pk_of(r))
            if cur is not None:
                out.append(cur)
        return out

    def inode_key(self, row: dict) -> tuple:
        return (S.INODE, (row["parent_id"], row["name"]))

    def now(self) -> float:
        return self.nn.clock.now()


# ------------------------------------------------------------- lock phase


def _ancestor_union(ctx: OpContext, hinted: Optional[list]) -> list:
    """(prefix path, order key, pk, hint entry or None) for every distinct ancestor."""
    seen = {}
    for i, r in enumerate(ctx.resolved):
        for k in range(1, r.depth):
            prefix = r.prefix(k)
            if prefix in seen:
                continue
            entry = ctx.nn.cache.get(prefix) if hinted is not None else None
            pk = (entry.parent_id, entry.name) if entry is not None else None
            seen[prefix] = (total_order_key(r.comps[:k]), pk, entry)
    return sorted(((p,) + v for p, v in seen.items()), key=lambda x: x[1])


def _walk(ctx: OpContext) -> None:
    """Per-component read-committed resolution, repairing the hint cache."""
    nn = ctx.nn
    done: dict = {"/": nn.root}
    for r in ctx.resolved:
        for k in range(1, r.depth):
            prefix = r.prefix(k)
            row = done.get(prefix)
            if row is None:
                parent = done[r.prefix(k - 1)]
                row = nn.read(ctx.tx, S.INODE, (parent["id"], r.comps[k - 1]), RC,
                              part_key=S.child_partition_key(parent, r.comps[k - 1], nn.policy))
                if row is None:
                    raise NotFound(prefix)
                if not row["is_dir"]:
                    raise NotADirectory(prefix)
                done[prefix] = row
                nn.cache.put(prefix, hint_from_row(row, k))
            r.chain.append(row)
        for row in r.chain[1:]:
            ctx.snapshot.load(S.INODE, (row["parent_id"], row["name"]), row)


def _apply_hints(ctx: OpContext, ancestors: list) -> None:
    """Fill each resolved chain with placeholder rows built from hint entries."""
    by_prefix = {a[0]: a[3] for a in ancestors}
    for r in ctx.resolved:
        for k in range(1, r.depth):
            e = by_prefix[r.prefix(k)]
            r.chain.append({"id": e.id, "parent_id": e.parent_id, "name": e.name,
                            "partition_key": e.partition_key, "is_dir": True,
                            "hashed_children": e.hashed_children, "_hint": True})


def _check_chain(ctx: OpContext, ancestors: list, rows: list) -> None:
    got = {}
    for (prefix, _, pk, entry), row in zip(ancestors, rows):
        if row is None or not row["is_dir"]:
            raise _StaleHint(prefix)
        if entry is not None and row["id"] != entry.id:
            raise _StaleHint(prefix)
        got[prefix] = row
    for r in ctx.resolved:
        for k in range(1, r.depth):
            expected = r.chain[k]
            row = got[r.prefix(k)]
            if row["id"] != expected["id"] or row["parent_id"] != expected["parent_id"]:
                raise _StaleHint(r.prefix(k))
            r.chain[k] = row
            ctx.snapshot.load(S.INODE, (row["parent_id"], row["name"]), row)


def _check_flags(ctx: OpContext, rows) -> None:
    for row in rows:
        if row is None:
            continue
        owner = row.get("subtree_lock_owner")
        if owner is None:
            continue
        if row["id"] == ctx.subtree_root and owner == ctx.nn.id:
            continue
        if owner in ctx.nn.alive_namenodes():
            raise SubtreeLocked(row["id"], owner)
        raise _DeadSubtreeLock(row)


def lock_phase(ctx: OpContext, force_cold: bool = False) -> PerTxSnapshot:
    nn, tx, tpl = ctx.nn, ctx.tx, ctx.template
    snap = ctx.snapshot

    if tpl.mutating:
        if nn.read(tx, S.NAMENODES, (nn.id,), RC) is None:
            raise NamenodeDown(f"namenode {nn.id} is not a registered member")

    hints = None if force_cold else [resolve_with_hints(nn.cache, p) for p in tpl.paths]
    warm = hints is not None and all(h is not None for h in hints)
    if warm:
        ancestors = _ancestor_union(ctx, hints)
        if any(a[3] is None for a in ancestors):  # evicted between the two lookups
            warm = False
    if warm:
        _apply_hints(ctx, ancestors)
    else:
        _walk(ctx)
        ancestors = _ancestor_union(ctx, None)

    probe = None
    if tpl.probe_path is not None:
        r = ctx.resolved[tpl.probe_path]
        probe = nn.read(tx, S.INODE, r.last_pk(), RC)
        if probe is not None and not warm:
            raise AlreadyExists(r.path)

    # lock the last component(s) plus id-generator rows, in the total order
    keyed = []
    for t in tpl.targets:
        r = ctx.resolved[t.path_index]
        if t.which == "parent":
            if r.depth <= 1:
                continue  # the root is immutable and never locked
            row = r.parent
            pk = (row["parent_id"], row["name"])
            keyed.append((total_order_key(r.comps[:-1]), pk, t, row.get("partition_key")))
        else:
            if r.depth == 0:
                continue
            pk = r.last_pk()
            pkey = S.child_partition_key(r.parent, r.comps[-1], nn.policy)
            keyed.append((total_order_key(r.comps), pk, t, pkey))
    keyed.sort(key=lambda k: k[0])
    uniq = OrderedDict()
    for order, pk, t, pkey in keyed:
        prev = uniq.get(pk)
        if prev is None or (prev[1] is not EXCL and t.mode is EXCL):
            uniq[pk] = (pkey, t.mode)
    items = [(S.INODE, pk, mode, pkey) for pk, (pkey, mode) in uniq.items()]
    items += [(S.IDGEN, (kind,), EXCL, None) for kind in sorted(tpl.extra_locks)]
    if len(items) == 1:
        table, pk, mode, pkey = items[0]
        locked = [nn.read(tx, table, pk, mode, part_key=pkey)]
    elif items:
        locked = nn.batch(tx, items)
    else:
        locked = []
    for (table, pk, _, _), row in zip(items, locked):
        snap.load(table, pk, row)

    # ancestors: validate hints (warm) or re-check the unlocked walk (cold, mutating)
    if ancestors and (warm or tpl.mutating):
        rows = nn.batch(tx, [(S.INODE, a[2] if a[2] else _chain_pk(ctx, a[0]), RC) for a in ancestors])
        _check_chain(ctx, ancestors, rows)
        if warm:
            for a, row in zip(ancestors, rows):
                nn.cache.put(a[0], hint_from_row(row, a[1][0]))
    if not warm and tpl.miss_surcharge:
        deepest = [a for a in ancestors][::-1]
        if deepest:
            for k in range(tpl.miss_surcharge):
                a = deepest[k % len(deepest)]
                nn.read(tx, S.INODE, _chain_pk(ctx, a[0]), RC)

    for r in ctx.resolved:
        if r.depth:
            r.last = snap.get(S.INODE, r.last_pk()) if snap.has(S.INODE, r.last_pk()) else None
            if r.last is not None and r.last["is_dir"]:
                nn.cache.put(r.path, hint_from_row(r.last, r.depth))
    if warm and probe is not None:
        raise AlreadyExists(ctx.resolved[tpl.probe_path].path)

    # expectations on the locked rows
    for t in tpl.targets:
        r = ctx.resolved[t.path_index]
        if t.which == "parent" or r.depth == 0:
            continue
        row = r.last
        if t.expect == "exists" and row is None:
            raise NotFound(r.path)
        if t.expect == "absent" and row is not None:
            raise AlreadyExists(r.path)

    flagged = [row for r in ctx.resolved for row in r.chain[1:]]
    flagged += [r.last for r in ctx.resolved if r.depth and r.last is not None]
    _check_flags(ctx, flagged)

    if tpl.related is not None:
        for table, value, mode in tpl.related(ctx):
            rows = nn.scan(tx, table, value, mode)
            ctx.related[(table, value)] = rows
            tdef = S_TABLES[table]
            for row in rows:
                snap.load(table, tdef.pk_of(row), row)
    return snap


def _chain_pk(ctx: OpContext, prefix: str) -> tuple:
    for r in ctx.resolved:
        for k in range(1, r.depth):
            if r.prefix(k) == prefix:
                row = r.chain[k]
                return (row["parent_id"], row["name"])
    raise KeyError(prefix)


# ---------------------------------------------------------------- namenode


@dataclass(frozen=True)
class NamenodeConfig:
    cache_capacity: int = 100_000
    beat_ms: float = 500.0
    missed_beats: int = 3
    retry_base_ms: float = 50.0
    retry_factor: float = 2.0
    max_attempts: int = 8

    @property
    def liveness_window(self) -> float:
        return self.beat_ms * self.missed_beats


def alive_namenodes(store: StoreCluster, clock, window_ms: float) -> list:
    tx = store.begin()
    try:
        rows = store.scan_full(tx, S.NAMENODES)
        store.commit(tx)
    except BaseException:
        store.abort(tx)
        raise
    now = clock.now()
    return sorted(r["namenode_id"] for r in rows if now - r["last_beat"] <= window_ms)


class Namenode:
    """A stateless metadata server.  Shareable across worker threads."""

    def __init__(self, store: StoreCluster, policy: S.PartitionPolicy = S.PartitionPolicy(),
                 config: NamenodeConfig = NamenodeConfig(), clock=None):
        self.store = store
        self.policy = policy
        self.config = config
        self.clock = clock or store.clock
        self.cache = InodeHintCache(config.cache_capacity)
        self.root = S.root_row(policy)
        self.alive = True
        self.id = self._register()
        self.last_ledger: Optional[RoundTripLedger] = None
        self.subtree_config = None
        # called before every liveness decision; the harness uses it to run due heartbeats
        self.membership_hook: Optional[Callable] = None
        self.last_beat_at = self.clock.now()

    def __repr__(self):
        return f"Namenode({self.id}{'' if self.alive else ', dead'})"

    # ---- membership

    def _register(self) -> int:
        tx = self.store.begin()
        try:
            nn_id = S.next_id(self.store, tx, "namenode")
            self.store.read_pk(tx, S.NAMENODES, (nn_id,), EXCL)
            self.store.write(tx, S.NAMENODES, {"namenode_id": nn_id, "counter": 0,
                                               "last_beat": self.clock.now()})
            self.store.commit(tx)
            return nn_id
        except BaseException:
            self.store.abort(tx)
            raise

    def heartbeat(self) -> None:
        self.check_alive()
        tx = self.store.begin(hint=(S.NAMENODES, self.id))
        try:
            row = self.store.read_pk(tx, S.NAMENODES, (self.id,), EXCL)
            if row is None:
                raise NamenodeDown(f"namenode {self.id} was removed")
            row["counter"] += 1
            row["last_beat"] = self.clock.now()
            self.store.write(tx, S.NAMENODES, row)
            self.store.commit(tx)
            self.last_beat_at = row["last_beat"]
        except BaseException:
            self.store.abort(tx)
            raise

    def alive_namenodes(self) -> list:
        if self.membership_hook is not None:
            self.membership_hook()
        return alive_namenodes(self.store, self.clock, self.config.liveness_window)

    def leader(self) -> Optional[int]:
        alive = self.alive_namenodes()
        return alive[0] if alive else None

    def kill(self) -> None:
        self.alive = False

    def check_alive(self) -> None:
        if not self.alive:
            raise NamenodeDown(f"namenode {self.id} is down")

    # ---- store access (every call first checks this process is still up)

    def read(self, tx, table, pk, mode=RC, part_key=None):
        self.check_alive()
        return self.store.read_pk(tx, table, pk, mode, part_key=part_key)

    def batch(self, tx, items, mode=RC):
        self.check_alive()
        return self.store.batch_read_pk(tx, items, mode)

    def scan(self, tx, table, value, mode=RC, predicate=None, projection=None):
        self.check_alive()
        return self.store.scan_partition(tx, table, value, predicate, mode, projection)

    def scan_index(self, tx, table, predicate=None, mode=RC, projection=None):
        self.check_alive()
        return self.store.scan_index(tx, table, predicate, mode, projection)

    # ---- operations

    def partition_hint(self, template: OpTemplate) -> Optional[tuple]:
        """Partition key of the first path's last component, if the hints know it."""
        if not template.paths:
            return None
        comps = split_path(template.paths[0])
        if not comps:
            return None
        if len(comps) == 1:
            parent = self.root
            return (S.INODE, S.child_partition_key(parent, comps[0], self.policy))
        e = self.cache.get(join_path(comps[:-1]))
        if e is None:
            return None
        if e.hashed_children:
            return (S.INODE, S.name_hash(e.id, comps[-1], self.policy.hash_seed))
        return (S.INODE, e.id)

    def execute(self, template: OpTemplate, *, force_cold: bool = False) -> OpResult:
        total = RoundTripLedger()
        attempts = 0
        stale_restarts = 0
        cold = force_cold
        while True:
            self.check_alive()
            hint = None if cold else self.partition_hint(template)
            try:
                tx = self.store.begin(hint)
            except Unavailable:
                tx = self.store.begin()
            ctx = OpContext(self, tx, template)
            try:
                lock_phase(ctx, force_cold=cold)
                value = template.body(ctx)
                self.check_alive()
                ctx.snapshot.flush(self.store, tx)
                self.store.commit(tx)
                total = total.merged(tx.ledger)
                self.last_ledger = tx.ledger
                return OpResult(value, total, attempts + 1, not cold and stale_restarts == 0,
                                tuple(tx.lock_partitions))
            except _StaleHint as e:
                self.store.abort(tx)
                total = total.merged(tx.ledger)
                self.cache.invalidate(str(e))
                stale_restarts += 1
                cold = True
                if stale_restarts > self.config.max_attempts:
                    raise RetriesExhausted(f"path kept changing under {template.paths}") from None
            except _DeadSubtreeLock as e:
                self.store.abort(tx)
                total = total.merged(tx.ledger)
                cleanup_dead_locks(self, e.row)
            except (SubtreeLocked, Timeout) as e:
                self.store.abort(tx)
                total = total.merged(tx.ledger)
                attempts += 1
                if attempts >= self.config.max_attempts:
                    raise RetriesExhausted(f"{template.kind} {template.paths}: {e}") from e
                self.clock.sleep(self.config.retry_base_ms * self.config.retry_factor ** (attempts - 1))
            except BaseException as e:
                self.store.abort(tx)
                e.ledger = total.merged(tx.ledger)
                raise


def cleanup_dead_locks(nn: Namenode, row: dict) -> bool:
    """Clear a subtree lock whose owner is no longer alive.  Returns whether cleared."""
    store = nn.store
    tx = store.begin()
    try:
        cur = nn.read(tx, S.INODE, (row["parent_id"], row["name"]), EXCL)
        owner = cur.get("subtree_lock_owner") if cur else None
        if owner is None or owner in nn.alive_namenodes():
            store.commit(tx)
            return False
        recs = nn.scan_index(tx, S.SUBTREE_OPS, lambda r: r["root_inode_id"] == cur["id"], EXCL)
        cur = dict(cur, subtree_lock_owner=None)
        store.write(tx, S.INODE, cur)
        for rec in recs:
            store.write(tx, S.SUBTREE_OPS, rec, "delete")
        store.commit(tx)
        return True
    except BaseException:
        store.abort(tx)
        raise
