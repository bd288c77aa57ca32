"""Subtree operations: delete, move, chmod, chown and set-quota on whole directories.

Phase 1 sets a persistent subtree flag on the root and registers the
operation; phase 2 drains in-flight inode operations by cycling write locks
level by level; phase 3 applies the change, incrementally for delete and as a
single root update otherwise.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from . import schema as S
from .errors import (InvalidConfig, NamenodeDown, NotADirectory, NotFound,
                     PermissionDenied, RetriesExhausted, SubtreeConflict, SubtreeLocked,
                     Timeout)
from .ndbsim import EXCL, RC
from .nncore import (SUPER, LockTarget, Namenode, OpTemplate, User, check_access,
                     cleanup_dead_locks, is_ancestor_path, join_path, split_path,
                     total_order_key)

KINDS = ("delete", "move", "chmod", "chown", "setquota")

__all__ = ["SubtreeConfig", "InMemorySubtree", "SubtreeHandle", "acquire_subtree_lock",
           "quiesce", "execute_subtree", "cleanup_dead_locks", "run_subtree_op", "set_quota"]


@dataclass(frozen=True)
class SubtreeConfig:
    delete_batch_size: int = 1000
    quiesce_parallelism: int = 4
    backoff_base_ms: float = 100.0
    backoff_factor: float = 2.0
    max_attempts: int = 10

    def __post_init__(self):
        if self.delete_batch_size < 1:
            raise InvalidConfig("delete_batch_size must be >= 1")
        if self.quiesce_parallelism < 1:
            raise InvalidConfig("quiesce_parallelism must be >= 1")


@dataclass(frozen=True)
class SubtreeHandle:
    op_id: int
    kind: str
    path: str
    root: dict


_PROJECTION = ("id", "parent_id", "name", "partition_key", "is_dir", "hashed_children",
               "has_quota", "size_hint", "replication")


@dataclass
class InMemorySubtree:
    root: dict
    root_path: str
    nodes: dict = field(default_factory=dict)      # id -> projected row
    levels: list = field(default_factory=list)     # levels[k] = ids at k+1 below the root
    paths: dict = field(default_factory=dict)      # id -> absolute path

    def __len__(self):
        return len(self.nodes)

    def post_order(self) -> list:
        """Descendant ids with every child before its parent."""
        out = []
        for level in reversed(self.levels):
            out.extend(level)
        return out

    def files(self) -> int:
        return sum(1 for n in self.nodes.values() if not n["is_dir"])

    def dirs(self) -> int:
        return sum(1 for n in self.nodes.values() if n["is_dir"])

    def id_set(self) -> frozenset:
        return frozenset(self.nodes)


def _config(nn: Namenode, config: Optional[SubtreeConfig]) -> SubtreeConfig:
    return config or nn.subtree_config or SubtreeConfig()


def _backoff(nn: Namenode, cfg: SubtreeConfig, attempt: int) -> None:
    nn.clock.sleep(cfg.backoff_base_ms * cfg.backoff_factor ** (attempt - 1))


# ------------------------------------------------------------------ phase 1


def acquire_subtree_lock(nn: Namenode, path: str, kind: str, *, user: User = SUPER,
                         dst: Optional[str] = None) -> SubtreeHandle:
    """Flag the subtree root and register the operation in one transaction."""
    if kind not in KINDS:
        raise ValueError(kind)

    def related(ctx):
        return []

    def body(ctx):
        ctx.check_traverse(0)
        root = ctx.last(0)
        if not root["is_dir"]:
            raise NotADirectory(path)
        if kind in ("delete", "move"):
            check_access(ctx.user, ctx.parent(0), "w", path)
        elif kind == "chmod" and not (ctx.user.is_super or ctx.user.name == root["owner"]):
            raise PermissionDenied(f"{ctx.user.name} does not own {path}")
        elif kind in ("chown", "setquota") and not ctx.user.is_super:
            raise PermissionDenied(f"{kind} requires the superuser")
        active = ctx.nn.scan_index(ctx.tx, S.SUBTREE_OPS)
        for rec in active:
            p = rec["root_path"]
            if p == path or is_ancestor_path(p, path) or is_ancestor_path(path, p):
                raise SubtreeConflict(rec)
        op_id = ctx.new_id("subtree_op")
        ctx.snapshot.put(S.SUBTREE_OPS, {
            "op_id": op_id, "namenode_id": ctx.nn.id, "root_inode_id": root["id"],
            "root_parent_id": root["parent_id"], "root_name": root["name"],
            "root_path": path, "kind": kind, "started_at": ctx.now(),
        }, covered_by=(S.IDGEN, ("subtree_op",)))
        flagged = dict(root, subtree_lock_owner=ctx.nn.id)
        ctx.snapshot.put(S.INODE, flagged)
        return SubtreeHandle(op_id, kind, path, flagged)

    tpl = OpTemplate("SubtreeLock", [path], [LockTarget(0, "last", EXCL)], body, user=user,
                     mutating=True, extra_locks=("subtree_op",), related=related)
    return nn.execute(tpl).value


def _clear_stale_record(nn: Namenode, rec: dict) -> bool:
    """Remove a conflicting record whose owner is dead."""
    if rec["namenode_id"] in nn.alive_namenodes():
        return False
    return cleanup_dead_locks(nn, {"parent_id": rec["root_parent_id"], "name": rec["root_name"],
                                   "id": rec["root_inode_id"]}) or _drop_record(nn, rec)


def _drop_record(nn: Namenode, rec: dict) -> bool:
    store = nn.store
    tx = store.begin()
    try:
        cur = nn.read(tx, S.SUBTREE_OPS, (rec["op_id"],), EXCL)
        if cur is not None:
            store.write(tx, S.SUBTREE_OPS, cur, "delete")
        store.commit(tx)
        return cur is not None
    except BaseException:
        store.abort(tx)
        raise


# ------------------------------------------------------------------ phase 2


def _scan_children(nn: Namenode, d: dict) -> list:
    store = nn.store
    tx = store.begin(hint=(S.INODE, d["id"]) if not d["hashed_children"] else None)
    try:
        pred = (lambda r, pid=d["id"]: r["parent_id"] == pid)
        if d["hashed_children"]:
            rows = nn.scan_index(tx, S.INODE, pred, EXCL, _PROJECTION)
        else:
            rows = nn.scan(tx, S.INODE, d["id"], EXCL, pred, _PROJECTION)
        store.commit(tx)
        return rows
    except BaseException:
        store.abort(tx)
        raise


def quiesce(nn: Namenode, handle: SubtreeHandle, config: Optional[SubtreeConfig] = None) -> InMemorySubtree:
    """Take and release write locks on every inode below the root, level by level."""
    cfg = _config(nn, config)
    tree = InMemorySubtree(handle.root, handle.path)
    tree.paths[handle.root["id"]] = handle.path
    frontier = [handle.root]
    with ThreadPoolExecutor(max_workers=cfg.quiesce_parallelism) as pool:
        while frontier:
            results = list(pool.map(lambda d: _scan_children(nn, d), frontier))
            level = []
            nxt = []
            for d, kids in zip(frontier, results):
                base = tree.paths[d["id"]]
                for k in sorted(kids, key=lambda r: r["name"]):
                    tree.nodes[k["id"]] = k
                    tree.paths[k["id"]] = (base.rstrip("/") + "/" + k["name"])
                    level.append(k["id"])
                    if k["is_dir"]:
                        nxt.append(k)
            if level:
                tree.levels.append(level)
            frontier = nxt
    return tree


# ------------------------------------------------------------------ phase 3


def _nearest_quota_inside(tree: InMemorySubtree, node_id: int) -> Optional[int]:
    """Quota-holding ancestor of ``node_id`` that is itself inside the subtree."""
    n = tree.nodes.get(node_id)
    while n is not None:
        pid = n["parent_id"]
        parent = tree.root if pid == tree.root["id"] else tree.nodes.get(pid)
        if parent is None:
            return None
        if parent["has_quota"]:
            return parent["id"]
        if parent is tree.root:
            return None
        n = parent
    return None


def _outer_quota_id(nn: Namenode, path: str) -> int:
    """Nearest quota holder strictly above ``path`` (the root always qualifies)."""
    comps = split_path(path)
    store = nn.store
    tx = store.begin()
    try:
        parent = nn.root
        best = S.ROOT_ID
        for k in range(1, len(comps)):
            row = nn.read(tx, S.INODE, (parent["id"], comps[k - 1]), RC)
            if row is None:
                raise NotFound(join_path(comps[:k]))
            if row["has_quota"]:
                best = row["id"]
            parent = row
        store.commit(tx)
        return best
    except BaseException:
        store.abort(tx)
        raise


def _delete_batch(nn: Namenode, tree: InMemorySubtree, ids: list, outer_quota: int) -> None:
    store = nn.store
    ids = sorted(ids, key=lambda i: total_order_key(split_path(tree.paths[i])))
    idset = set(ids)
    tx = store.begin()
    try:
        keys = [(S.INODE, (tree.nodes[i]["parent_id"], tree.nodes[i]["name"]), EXCL,
                 tree.nodes[i]["partition_key"]) for i in ids]
        rows = nn.batch(tx, keys)
        live = [r for r in rows if r is not None]
        related = {}
        for table in S.RELATED_ORDER:
            if table == S.QUOTA:
                pred = (lambda r: r["inode_id"] in idset or r["inode_id"] == outer_quota)
            else:
                pred = (lambda r: r["inode_id"] in idset)
            related[table] = nn.scan_index(tx, table, pred, EXCL)
        freed_ns = 0
        freed_ds = 0
        for r in live:
            q = _nearest_quota_inside(tree, r["id"])
            if q is None:
                freed_ns += 1
                freed_ds += r["size_hint"] * max(r["replication"], 1)
        for table in S.RELATED_ORDER:
            for rel in related[table]:
                if table == S.QUOTA and rel["inode_id"] == outer_quota and rel["inode_id"] not in idset:
                    continue
                store.write(tx, table, rel, "delete",
                            covered_by=_cover(tree, rel["inode_id"]))
        for q in related[S.QUOTA]:
            if q["inode_id"] == outer_quota and q["inode_id"] not in idset:
                store.write(tx, S.QUOTA, dict(q, ns_used=q["ns_used"] - freed_ns,
                                              ds_used=q["ds_used"] - freed_ds))
        for r in live:
            store.write(tx, S.INODE, r, "delete")
        nn.check_alive()
        store.commit(tx)
    except BaseException:
        store.abort(tx)
        raise


def _cover(tree: InMemorySubtree, inode_id: int) -> tuple:
    n = tree.nodes[inode_id]
    return (S.INODE, (n["parent_id"], n["name"]))


def _finish_template(nn: Namenode, handle: SubtreeHandle, tree: InMemorySubtree, *,
                     dst: Optional[str], value, user: User) -> OpTemplate:
    kind = handle.kind
    root_id = handle.root["id"]

    def record_rows(ctx):
        return [r for r in ctx.related_rows(S.SUBTREE_OPS, handle.op_id)]

    def drop_record(ctx):
        for rec in record_rows(ctx):
            ctx.snapshot.delete(S.SUBTREE_OPS, rec)

    def root_row(ctx):
        row = ctx.last(0)
        if row is None or row["id"] != root_id or row.get("subtree_lock_owner") != ctx.nn.id:
            raise SubtreeConflict(f"subtree lock on {handle.path} was lost")
        return row

    if kind == "delete":
        def related(ctx):
            out = [(S.QUOTA, ctx.nearest_quota_row(0)["id"], EXCL)]
            if handle.root["has_quota"]:
                out.append((S.QUOTA, root_id, EXCL))
            return out + [(S.SUBTREE_OPS, handle.op_id, EXCL)]

        def body(ctx):
            row = root_row(ctx)
            d = dict(row)
            pred = (lambda r: r["parent_id"] == d["id"])
            if d["hashed_children"]:
                kids = ctx.nn.scan_index(ctx.tx, S.INODE, pred, EXCL, ("id",))
            else:
                kids = ctx.nn.scan(ctx.tx, S.INODE, d["id"], EXCL, pred, ("id",))
            if kids:
                raise SubtreeConflict(f"{handle.path} gained children while locked")
            outer = ctx.nearest_quota_row(0)["id"]
            q = ctx.snapshot.get(S.QUOTA, (outer,))
            ctx.snapshot.put(S.QUOTA, dict(q, ns_used=q["ns_used"] - 1))
            if d["has_quota"] and ctx.snapshot.has(S.QUOTA, (root_id,)):
                own = ctx.snapshot.get(S.QUOTA, (root_id,))
                if own is not None:
                    ctx.snapshot.delete(S.QUOTA, own, covered_by=ctx.inode_key(row))
            ctx.snapshot.delete(S.INODE, row)
            if ctx.depth(0) > 1:
                p = dict(ctx.parent(0), mtime=ctx.now())
                ctx.snapshot.put(S.INODE, p)
            drop_record(ctx)
            ctx.nn.cache.invalidate(handle.path)

        return OpTemplate("SubtreeDelete", [handle.path],
                          [LockTarget(0, "parent", EXCL), LockTarget(0, "last", EXCL)],
                          body, user=user, mutating=True, related=related, subtree_root=root_id)

    if kind == "move":
        def body(ctx):
            row = root_row(ctx)
            ctx.check_traverse(1)
            dp = ctx.parent(1)
            check_access(ctx.user, dp, "w", dst)
            name = ctx.resolved[1].comps[-1]
            new = dict(row, parent_id=dp["id"], name=name, subtree_lock_owner=None,
                       partition_key=S.child_partition_key(dp, name, ctx.policy),
                       depth=ctx.depth(1), mtime=ctx.now())
            ctx.snapshot.delete(S.INODE, row)
            ctx.snapshot.put(S.INODE, new)
            for i in (0, 1):
                if ctx.depth(i) > 1:
                    ctx.snapshot.put(S.INODE, dict(ctx.parent(i), mtime=ctx.now()))
            drop_record(ctx)
            ctx.nn.cache.invalidate(handle.path)

        return OpTemplate("SubtreeMove", [handle.path, dst],
                          [LockTarget(0, "parent", EXCL), LockTarget(0, "last", EXCL),
                           LockTarget(1, "parent", EXCL), LockTarget(1, "last", EXCL, "absent")],
                          body, user=user, mutating=True,
                          related=lambda ctx: [(S.SUBTREE_OPS, handle.op_id, EXCL)],
                          subtree_root=root_id)

    def body(ctx):
        row = dict(root_row(ctx), subtree_lock_owner=None)
        if kind == "chmod":
            row["perms"] = int(value) & 0o7777
        elif kind == "chown":
            owner, _, group = str(value).partition(":")
            row["owner"] = owner or row["owner"]
            row["group"] = group or row["group"]
        else:
            ns_quota, ds_quota = value
            ns_used = len(tree)
            ds_used = sum(n["size_hint"] * max(n["replication"], 1)
                          for n in tree.nodes.values() if not n["is_dir"])
            row["has_quota"] = True
            ctx.snapshot.put(S.QUOTA, S.quota_row(root_id, ns_quota, ds_quota, ns_used, ds_used),
                             covered_by=ctx.inode_key(row))
        ctx.snapshot.put(S.INODE, row)
        drop_record(ctx)

    def related(ctx):
        out = [(S.QUOTA, root_id, EXCL)] if kind == "setquota" else []
        return out + [(S.SUBTREE_OPS, handle.op_id, EXCL)]

    return OpTemplate("Subtree" + kind.capitalize(), [handle.path],
                      [LockTarget(0, "last", EXCL)], body, user=user, mutating=True,
                      related=related, subtree_root=root_id)


def execute_subtree(nn: Namenode, handle: SubtreeHandle, tree: InMemorySubtree, *,
                    dst: Optional[str] = None, value=None, user: User = SUPER,
                    config: Optional[SubtreeConfig] = None,
                    crash_after: Optional[int] = None) -> int:
    """Apply the operation.  Returns the number of descendant delete batches run.

    ``crash_after`` kills ``nn`` once that many delete batches have committed.
    """
    cfg = _config(nn, config)
    batches = 0
    if handle.kind == "delete":
        order = tree.post_order()
        outer = _outer_quota_id(nn, handle.path) if order else S.ROOT_ID
        for start in range(0, len(order), cfg.delete_batch_size):
            if crash_after is not None and batches >= crash_after:
                nn.kill()
                raise NamenodeDown(f"namenode {nn.id} crashed after {batches} batches")
            _delete_batch(nn, tree, order[start:start + cfg.delete_batch_size], outer)
            batches += 1
        if crash_after is not None and batches >= crash_after:
            nn.kill()
            raise NamenodeDown(f"namenode {nn.id} crashed after {batches} batches")
    nn.execute(_finish_template(nn, handle, tree, dst=dst, value=value, user=user))
    return batches


def _release(nn: Namenode, handle: SubtreeHandle) -> None:
    """Undo phase 1 after a failure that left the namespace untouched."""
    store = nn.store
    tx = store.begin()
    try:
        row = nn.read(tx, S.INODE, (handle.root["parent_id"], handle.root["name"]), EXCL)
        if row is not None and row.get("subtree_lock_owner") == nn.id:
            store.write(tx, S.INODE, dict(row, subtree_lock_owner=None))
        rec = nn.read(tx, S.SUBTREE_OPS, (handle.op_id,), EXCL)
        if rec is not None:
            store.write(tx, S.SUBTREE_OPS, rec, "delete")
        store.commit(tx)
    except BaseException:
        store.abort(tx)
        raise


# ---------------------------------------------------------------- protocol


def _degrade(nn: Namenode, kind: str, path: str, *, dst, value, user):
    from . import fsops
    if kind == "delete":
        return fsops._run(nn, fsops.delete_template(path, user=user))
    if kind == "move":
        return fsops._run(nn, fsops.move_template(path, dst, user=user))
    if kind in ("chmod", "chown"):
        attr = "perms" if kind == "chmod" else "owner"
        return fsops._run(nn, fsops.set_attr_template(path, attr, value, user=user))
    raise NotADirectory(f"quotas apply to directories: {path}")


def run_subtree_op(nn: Namenode, kind: str, path: str, *, dst: Optional[str] = None,
                   value=None, user: User = SUPER, config: Optional[SubtreeConfig] = None,
                   crash_after: Optional[int] = None):
    """All three phases, with backoff on conflicts and quiesce timeouts."""
    cfg = _config(nn, config)
    if kind == "move":
        if dst is None:
            raise ValueError("move needs a destination")
        from .fsops import _check_move_paths
        _check_move_paths(path, dst)
    attempt = 0
    while True:
        try:
            handle = acquire_subtree_lock(nn, path, kind, user=user, dst=dst)
            break
        except NotADirectory:
            if kind == "setquota":
                raise
            return _degrade(nn, kind, path, dst=dst, value=value, user=user)
        except SubtreeConflict as e:
            rec = e.args[0] if e.args and isinstance(e.args[0], dict) else None
            if rec is not None and _clear_stale_record(nn, rec):
                continue
            attempt += 1
            if attempt >= cfg.max_attempts:
                raise RetriesExhausted(f"subtree {kind} on {path}: {e}") from e
            _backoff(nn, cfg, attempt)

    attempt = 0
    while True:
        try:
            tree = quiesce(nn, handle, cfg)
            break
        except Timeout as e:
            attempt += 1
            if attempt >= cfg.max_attempts:
                _release(nn, handle)
                raise RetriesExhausted(f"could not quiesce {path}") from e
            _backoff(nn, cfg, attempt)
    try:
        execute_subtree(nn, handle, tree, dst=dst, value=value, user=user, config=cfg,
                        crash_after=crash_after)
    except NamenodeDown:
        raise
    except BaseException:
        if kind != "delete" and nn.alive:
            _release(nn, handle)
        raise
    return None


def set_quota(nn: Namenode, path: str, ns_quota: int = -1, ds_quota: int = -1, *,
              user: User = SUPER, config: Optional[SubtreeConfig] = None) -> None:
    if split_path(path) == []:
        from .errors import RootImmutable
        raise RootImmutable("the root quota is fixed")
    run_subtree_op(nn, "setquota", path, value=(ns_quota, ds_quota), user=user, config=config)
