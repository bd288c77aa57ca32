"""Single-transaction file-system operations and their round-trip budgets.

Each public function builds an :class:`~ndbfs.nncore.OpTemplate` and runs it on
a namenode.  Directory-wide work (recursive delete, moving a non-empty
directory, directory chmod/chown, set-quota) is routed to :mod:`ndbfs.subtree`.

The per-operation cost of the most recent call on the current thread is
available as ``last_result()``.
"""
from __future__ import annotations

import enum
import threading
from typing import Optional

from . import schema as S
from .errors import (AlreadyExists, InvalidMove, LeaseDenied, NotADirectory, NotEmpty,
                     NotAFile, NotFound, PermissionDenied, QuotaExceeded, RootImmutable,
                     Unsupported)
from .ndbsim import EXCL, RC, SHARED, RoundTripLedger
from .nncore import (SUPER, LockTarget, Namenode, OpContext, OpResult, OpTemplate, User,
                     check_access, is_ancestor_path, split_path)


class OpKind(enum.Enum):
    MKDIRS = "Mkdirs"
    CREATE_FILE = "CreateFile"
    ADD_BLOCK = "AddBlock"
    GET_BLOCK_LOCATIONS = "GetBlockLocations"
    STAT = "Stat"
    LIST_DIR = "ListDir"
    SET_PERMS = "SetPerms"
    SET_OWNER = "SetOwner"
    SET_REPLICATION = "SetReplication"
    DELETE_FILE = "DeleteFile"
    MOVE_FILE = "MoveFile"
    CONTENT_SUMMARY = "ContentSummary"
    APPEND = "Append"


# Re-reads of the deepest ancestors a create issues when it resolved its path
# without hints.  Fixed so a cold create at depth 10 costs 26 round trips.
CREATE_MISS_SURCHARGE = 6

STORAGE_POOL = 24

_local = threading.local()


def last_result() -> Optional[OpResult]:
    return getattr(_local, "result", None)


def reset_last_result() -> None:
    _local.result = None


def _run(nn: Namenode, tpl: OpTemplate, force_cold: bool = False):
    try:
        res = nn.execute(tpl, force_cold=force_cold)
    except BaseException as e:
        _local.result = OpResult(None, getattr(e, "ledger", None) or RoundTripLedger(), 0)
        raise
    _local.result = res
    return res.value


def _not_root(path: str) -> None:
    if split_path(path) == []:
        raise RootImmutable("the root inode cannot be modified")


def _quota_target(ctx: OpContext, i: int = 0) -> tuple:
    q = ctx.nearest_quota_row(i)
    return (S.QUOTA, q["id"], EXCL)


def _quota_row(ctx: OpContext, i: int = 0) -> dict:
    q = ctx.nearest_quota_row(i)
    row = ctx.snapshot.get(S.QUOTA, (q["id"],)) if ctx.snapshot.has(S.QUOTA, (q["id"],)) else None
    if row is None:
        raise NotFound(f"quota row of inode {q['id']}")
    return row


def _charge_quota(ctx: OpContext, ns: int = 0, ds: int = 0, i: int = 0) -> None:
    row = dict(_quota_row(ctx, i))
    ns_used, ds_used = row["ns_used"] + ns, row["ds_used"] + ds
    if ns > 0 and row["ns_quota"] >= 0 and ns_used > row["ns_quota"]:
        raise QuotaExceeded(f"namespace quota {row['ns_quota']} exceeded")
    if ds > 0 and row["ds_quota"] >= 0 and ds_used > row["ds_quota"]:
        raise QuotaExceeded(f"disk quota {row['ds_quota']} exceeded")
    row["ns_used"], row["ds_used"] = ns_used, ds_used
    ctx.snapshot.put(S.QUOTA, row)


def _touch_parent(ctx: OpContext, i: int = 0) -> None:
    if ctx.depth(i) <= 1:
        return  # the root is immutable
    parent = dict(ctx.parent(i))
    parent["mtime"] = ctx.now()
    ctx.snapshot.put(S.INODE, parent)


def _attrs(row: dict) -> dict:
    keys = ("id", "name", "is_dir", "perms", "owner", "group", "replication", "size_hint",
            "depth", "mtime")
    return {k: row[k] for k in keys}


def _node_key(ctx: OpContext, i: int = 0) -> tuple:
    r = ctx.resolved[i]
    return (S.INODE, r.last_pk())


# ----------------------------------------------------------------- creation


def _new_inode(ctx: OpContext, *, is_dir: bool, perms, replication: int) -> dict:
    ctx.check_traverse(0)
    parent = ctx.parent(0)
    check_access(ctx.user, parent, "w", ctx.path(0))
    _charge_quota(ctx, ns=1)
    r = ctx.resolved[0]
    row = S.make_inode(ctx.new_id("inode"), parent["id"], r.comps[-1], is_dir=is_dir,
                       depth=r.depth, policy=ctx.policy, parent=parent, perms=perms,
                       owner=ctx.user.name, group=ctx.user.groups[0] if ctx.user.groups else S.SUPERGROUP,
                       replication=replication, now=ctx.now())
    ctx.snapshot.put(S.INODE, row)
    _touch_parent(ctx)
    return row


def _peek_next_id(ctx: OpContext, kind: str) -> int:
    return ctx.snapshot.get(S.IDGEN, (kind,))["next"]


def create_template(path: str, *, user: User = SUPER, perms=None, client: str = "client-0",
                    replication: int = 3) -> OpTemplate:
    def body(ctx):
        row = _new_inode(ctx, is_dir=False, perms=perms, replication=replication)
        ctx.snapshot.put(S.LEASE, {"inode_id": row["id"], "holder": client,
                                   "acquired_at": ctx.now()}, covered_by=_node_key(ctx))
        return row["id"]

    def related(ctx):
        return [(S.LEASE, _peek_next_id(ctx, "inode"), EXCL), _quota_target(ctx)]

    return OpTemplate(OpKind.CREATE_FILE.value, [path],
                      [LockTarget(0, "parent", EXCL), LockTarget(0, "last", EXCL, "absent")],
                      body, user=user, mutating=True, probe_path=0, extra_locks=("inode",),
                      related=related, miss_surcharge=CREATE_MISS_SURCHARGE)


def create_file(nn: Namenode, path: str, *, user: User = SUPER, perms=None,
                client: str = "client-0", replication: int = 3, force_cold: bool = False) -> int:
    _not_root(path)
    return _run(nn, create_template(path, user=user, perms=perms, client=client,
                                    replication=replication), force_cold)


def mkdir_template(path: str, *, user: User = SUPER, perms=None) -> OpTemplate:
    def body(ctx):
        return _new_inode(ctx, is_dir=True, perms=perms, replication=0)["id"]

    return OpTemplate(OpKind.MKDIRS.value, [path],
                      [LockTarget(0, "parent", EXCL), LockTarget(0, "last", EXCL, "absent")],
                      body, user=user, mutating=True, probe_path=0, extra_locks=("inode",),
                      related=lambda ctx: [_quota_target(ctx)])


def mkdir(nn: Namenode, path: str, *, user: User = SUPER, perms=None,
          force_cold: bool = False) -> int:
    """Create one directory whose parent exists."""
    _not_root(path)
    return _run(nn, mkdir_template(path, user=user, perms=perms), force_cold)


def mkdirs(nn: Namenode, path: str, *, user: User = SUPER, perms=None) -> int:
    """Create every missing directory along ``path``; one transaction per created level."""
    comps = split_path(path)
    inode_id = S.ROOT_ID
    for k in range(1, len(comps) + 1):
        prefix = "/" + "/".join(comps[:k])
        try:
            inode_id = mkdir(nn, prefix, user=user, perms=perms)
        except AlreadyExists:
            st = stat(nn, prefix, user=user)
            if not st["is_dir"]:
                raise NotADirectory(prefix) from None
            inode_id = st["id"]
    return inode_id


# ------------------------------------------------------------------ blocks


def add_block_template(path: str, client: str, *, user: User = SUPER, num_bytes: int = 0) -> OpTemplate:
    def related(ctx):
        fid = ctx.resolved[0].last["id"] if ctx.resolved[0].last else 0
        return [(S.LEASE, fid, EXCL), _quota_target(ctx), (S.BLOCK, fid, EXCL)]

    def body(ctx):
        ctx.check_traverse(0)
        f = ctx.last(0)
        if f["is_dir"]:
            raise NotAFile(ctx.path(0))
        lease = ctx.snapshot.get(S.LEASE, (f["id"],)) if ctx.snapshot.has(S.LEASE, (f["id"],)) else None
        if lease is None or lease["holder"] != client:
            raise LeaseDenied(f"{client} does not hold the lease on {ctx.path(0)}")
        blocks = ctx.related_rows(S.BLOCK, f["id"])
        index = max((b["index_in_file"] for b in blocks), default=-1) + 1
        _charge_quota(ctx, ds=num_bytes * f["replication"])
        block_id = ctx.new_id("block")
        cov = _node_key(ctx)
        ctx.snapshot.put(S.BLOCK, {"inode_id": f["id"], "block_id": block_id,
                                   "index_in_file": index, "generation": 1,
                                   "num_bytes": num_bytes}, covered_by=cov)
        for k in range(f["replication"]):
            storage = (block_id * f["replication"] + k) % STORAGE_POOL
            ctx.snapshot.put(S.REPLICA, {"inode_id": f["id"], "block_id": block_id,
                                         "storage_id": storage}, covered_by=cov)
            ctx.snapshot.put(S.RUC, {"inode_id": f["id"], "block_id": block_id,
                                     "storage_id": storage}, covered_by=cov)
        if num_bytes:
            g = dict(f, size_hint=f["size_hint"] + num_bytes, mtime=ctx.now())
            ctx.snapshot.put(S.INODE, g)
        return block_id

    return OpTemplate(OpKind.ADD_BLOCK.value, [path], [LockTarget(0, "last", EXCL)], body,
                      user=user, mutating=True, extra_locks=("block",), related=related)


def add_block(nn: Namenode, path: str, client: str = "client-0", *, user: User = SUPER,
              num_bytes: int = 0, force_cold: bool = False) -> int:
    return _run(nn, add_block_template(path, client, user=user, num_bytes=num_bytes), force_cold)


def get_block_locations_template(path: str, *, user: User = SUPER) -> OpTemplate:
    def related(ctx):
        fid = ctx.resolved[0].last["id"] if ctx.resolved[0].last else 0
        return [(S.BLOCK, fid, SHARED), (S.REPLICA, fid, SHARED)]

    def body(ctx):
        ctx.check_traverse(0)
        f = ctx.last(0)
        if f["is_dir"]:
            raise NotAFile(ctx.path(0))
        check_access(ctx.user, f, "r", ctx.path(0))
        blocks = sorted(ctx.related_rows(S.BLOCK, f["id"]), key=lambda b: b["index_in_file"])
        reps: dict = {}
        for r in ctx.related_rows(S.REPLICA, f["id"]):
            reps.setdefault(r["block_id"], []).append(r["storage_id"])
        return [(b["block_id"], sorted(reps.get(b["block_id"], []))) for b in blocks]

    return OpTemplate(OpKind.GET_BLOCK_LOCATIONS.value, [path],
                      [LockTarget(0, "last", SHARED)], body, user=user, related=related)


def get_block_locations(nn: Namenode, path: str, *, user: User = SUPER,
                        force_cold: bool = False) -> list:
    return _run(nn, get_block_locations_template(path, user=user), force_cold)


def append(nn: Namenode, path: str, *args, **kw):
    raise Unsupported("append is not implemented")


# ------------------------------------------------------------------ reading


def stat_template(path: str, *, user: User = SUPER) -> OpTemplate:
    def body(ctx):
        ctx.check_traverse(0)
        return _attrs(ctx.last(0))

    return OpTemplate(OpKind.STAT.value, [path], [LockTarget(0, "last", SHARED)], body, user=user)


def stat(nn: Namenode, path: str, *, user: User = SUPER, force_cold: bool = False) -> dict:
    return _run(nn, stat_template(path, user=user), force_cold)


def _children(ctx: OpContext, d: dict, mode=RC, projection=None) -> list:
    """Children of directory row ``d``: one PPIS, or an IS when they are hash-placed."""
    pred = (lambda r, pid=d["id"]: r["parent_id"] == pid)
    if d["hashed_children"]:
        return ctx.nn.scan_index(ctx.tx, S.INODE, pred, mode, projection)
    return ctx.nn.scan(ctx.tx, S.INODE, d["id"], mode, pred, projection)


def list_dir_template(path: str, *, user: User = SUPER) -> OpTemplate:
    def body(ctx):
        ctx.check_traverse(0)
        d = ctx.last(0)
        if not d["is_dir"]:
            return [_attrs(d)]
        check_access(ctx.user, d, "r", ctx.path(0))
        return sorted((_attrs(r) for r in _children(ctx, d)), key=lambda a: a["name"])

    return OpTemplate(OpKind.LIST_DIR.value, [path], [LockTarget(0, "last", SHARED)], body, user=user)


def list_dir(nn: Namenode, path: str, *, user: User = SUPER, force_cold: bool = False) -> list:
    return _run(nn, list_dir_template(path, user=user), force_cold)


def content_summary(nn: Namenode, path: str, *, user: User = SUPER) -> tuple:
    """(files, directories, bytes) strictly below ``path``; lock-free, so only
    eventually consistent under concurrent mutation."""
    def body(ctx):
        ctx.check_traverse(0)
        top = ctx.last(0)
        if not top["is_dir"]:
            return (1, 0, top["size_hint"])
        files = dirs = nbytes = 0
        frontier = [top]
        while frontier:
            nxt = []
            for d in frontier:
                for c in _children(ctx, d):
                    if c["is_dir"]:
                        dirs += 1
                        nxt.append(c)
                    else:
                        files += 1
                        nbytes += c["size_hint"]
            frontier = nxt
        return (files, dirs, nbytes)

    tpl = OpTemplate(OpKind.CONTENT_SUMMARY.value, [path], [LockTarget(0, "last", RC)], body, user=user)
    return _run(nn, tpl)


# ---------------------------------------------------------------- mutation

class _DirectoryAttr(Exception):
    """A directory's permissions or owner change runs as a subtree operation."""


_ATTR_KIND = {"perms": OpKind.SET_PERMS, "owner": OpKind.SET_OWNER,
              "replication": OpKind.SET_REPLICATION}


def set_attr_template(path: str, kind: str, value, *, user: User = SUPER) -> OpTemplate:
    if kind not in _ATTR_KIND:
        raise ValueError(f"unknown attribute {kind!r}")

    def body(ctx):
        ctx.check_traverse(0)
        row = dict(ctx.last(0))
        if row["is_dir"]:
            if kind == "replication":
                raise NotAFile(ctx.path(0))
            raise _DirectoryAttr(ctx.path(0))
        if kind == "perms":
            if not (ctx.user.is_super or ctx.user.name == row["owner"]):
                raise PermissionDenied(f"{ctx.user.name} does not own {ctx.path(0)}")
            row["perms"] = int(value) & 0o7777
        elif kind == "owner":
            if not ctx.user.is_super:
                raise PermissionDenied("only the superuser may change ownership")
            owner, _, group = str(value).partition(":")
            row["owner"] = owner or row["owner"]
            row["group"] = group or row["group"]
        else:
            check_access(ctx.user, row, "w", ctx.path(0))
            row["replication"] = int(value)
        ctx.snapshot.put(S.INODE, row)

    return OpTemplate(_ATTR_KIND[kind].value, [path], [LockTarget(0, "last", EXCL)], body,
                      user=user, mutating=True)


def set_attr(nn: Namenode, path: str, kind: str, value, *, user: User = SUPER,
             force_cold: bool = False) -> None:
    """chmod/chown/setrep.  Directory chmod and chown run as subtree operations."""
    _not_root(path)
    try:
        return _run(nn, set_attr_template(path, kind, value, user=user), force_cold)
    except _DirectoryAttr:
        pass
    from . import subtree
    return subtree.run_subtree_op(nn, "chmod" if kind == "perms" else "chown", path,
                                  value=value, user=user)


def delete_template(path: str, *, user: User = SUPER) -> OpTemplate:
    """Delete a file or an empty directory."""
    def related(ctx):
        row = ctx.resolved[0].last
        if row is None:
            return []
        out = [(S.LEASE, row["id"], EXCL), _quota_target(ctx)]
        if not row["is_dir"]:
            out += [(t, row["id"], EXCL) for t in S.RELATED_ORDER[2:]]
        return out

    def body(ctx):
        ctx.check_traverse(0)
        check_access(ctx.user, ctx.parent(0), "w", ctx.path(0))
        row = ctx.last(0)
        if row["is_dir"]:
            kids = _children(ctx, row, EXCL, ("id", "parent_id", "name", "partition_key"))
            if kids:
                raise NotEmpty(ctx.path(0))
            ctx.nn.cache.invalidate(ctx.path(0))
        cov = _node_key(ctx)
        for table in S.FILE_RELATED_TABLES:
            for r in ctx.related_rows(table, row["id"]):
                ctx.snapshot.delete(table, r, covered_by=cov)
        _charge_quota(ctx, ns=-1, ds=-row["size_hint"] * max(row["replication"], 1))
        ctx.snapshot.delete(S.INODE, row)
        _touch_parent(ctx)

    return OpTemplate(OpKind.DELETE_FILE.value, [path],
                      [LockTarget(0, "parent", EXCL), LockTarget(0, "last", EXCL)],
                      body, user=user, mutating=True, related=related)


def delete(nn: Namenode, path: str, *, recursive: bool = False, user: User = SUPER,
           force_cold: bool = False) -> None:
    """Delete a file or empty directory; ``recursive`` deletes a whole subtree."""
    _not_root(path)
    try:
        return _run(nn, delete_template(path, user=user), force_cold)
    except NotEmpty:
        if not recursive:
            raise
    from . import subtree
    return subtree.run_subtree_op(nn, "delete", path, user=user)


delete_file = delete


def move_template(src: str, dst: str, *, user: User = SUPER) -> OpTemplate:
    """Move a file or an empty directory."""
    def body(ctx):
        ctx.check_traverse(0)
        ctx.check_traverse(1)
        sp, dp = ctx.parent(0), ctx.parent(1)
        check_access(ctx.user, sp, "w", ctx.path(0))
        check_access(ctx.user, dp, "w", ctx.path(1))
        row = ctx.last(0)
        if row["is_dir"] and _children(ctx, row, EXCL, ("id", "parent_id", "name", "partition_key")):
            raise NotEmpty(ctx.path(0))
        new = dict(row, parent_id=dp["id"], name=ctx.resolved[1].comps[-1],
                   partition_key=S.child_partition_key(dp, ctx.resolved[1].comps[-1], ctx.policy),
                   depth=ctx.depth(1), mtime=ctx.now())
        ctx.snapshot.delete(S.INODE, row)
        ctx.snapshot.put(S.INODE, new)
        _touch_parent(ctx, 0)
        _touch_parent(ctx, 1)
        if row["is_dir"]:
            ctx.nn.cache.invalidate(ctx.path(0))

    return OpTemplate(OpKind.MOVE_FILE.value, [src, dst],
                      [LockTarget(0, "parent", EXCL), LockTarget(0, "last", EXCL),
                       LockTarget(1, "parent", EXCL), LockTarget(1, "last", EXCL, "absent")],
                      body, user=user, mutating=True)


def _check_move_paths(src: str, dst: str) -> None:
    _not_root(src)
    _not_root(dst)
    if src == dst or is_ancestor_path(src, dst):
        raise InvalidMove(f"cannot move {src} into itself")


def move(nn: Namenode, src: str, dst: str, *, user: User = SUPER, force_cold: bool = False) -> None:
    """Rename ``src`` to ``dst``; non-empty directories move via the subtree protocol."""
    _check_move_paths(src, dst)
    try:
        return _run(nn, move_template(src, dst, user=user), force_cold)
    except NotEmpty:
        pass
    from . import subtree
    return subtree.run_subtree_op(nn, "move", src, dst=dst, user=user)


move_file = move


# ----------------------------------------------------------------- budgets


def budget(kind: OpKind, depth: int, cache_hit: bool) -> dict:
    """Expected ledger counts for one successful, uncontended operation.

    Shapes: files for file operations, a directory whose children are
    colocated for ListDir, a fresh block-less file with a lease for
    DeleteFile, a file with replication 3 for AddBlock and a move between two
    distinct parents at the same depth for MoveFile.  ``depth`` is the depth of
    the target and must be at least 2.
    """
    if depth < 2:
        raise ValueError("budgets are stated for depth >= 2")
    walk = 0 if cache_hit else depth - 1
    chain = 1 if cache_hit else 0          # the ancestor batch replaces the walk
    k = OpKind(kind) if not isinstance(kind, OpKind) else kind
    if k is OpKind.CREATE_FILE:
        rc = 2 + walk + (0 if cache_hit else CREATE_MISS_SURCHARGE)
        return {"PK_rc": rc, "Batch": 2, "PPIS": 2, "PK_w": 5}
    if k is OpKind.MKDIRS:
        return {"PK_rc": 2 + walk, "Batch": 2, "PPIS": 1, "PK_w": 4}
    if k is OpKind.GET_BLOCK_LOCATIONS:
        return _nz({"PK_rc": walk, "Batch": chain, "PK_shared": 1, "PPIS": 2})
    if k is OpKind.STAT:
        return _nz({"PK_rc": walk, "Batch": chain, "PK_shared": 1})
    if k is OpKind.LIST_DIR:
        return _nz({"PK_rc": walk, "Batch": chain, "PK_shared": 1, "PPIS": 1})
    if k in (OpKind.SET_PERMS, OpKind.SET_OWNER, OpKind.SET_REPLICATION):
        return {"PK_rc": 1 + walk, "PK_excl": 1, "Batch": 1, "PK_w": 1}
    if k is OpKind.ADD_BLOCK:
        return {"PK_rc": 1 + walk, "Batch": 2, "PPIS": 3, "PK_w": 9}
    if k is OpKind.DELETE_FILE:
        return {"PK_rc": 1 + walk, "Batch": 2, "PPIS": 10, "PK_w": 4}
    if k is OpKind.MOVE_FILE:
        walk = 0 if cache_hit else 2 * (depth - 1) - (depth - 2)  # shared prefix read once
        return {"PK_rc": 1 + walk, "Batch": 2, "PK_w": 4}
    raise ValueError(f"no fixed budget for {k.value}")


def _nz(d: dict) -> dict:
    return {k: v for k, v in d.items() if v}


BUDGETED_KINDS = (OpKind.CREATE_FILE, OpKind.MKDIRS, OpKind.ADD_BLOCK,
                  OpKind.GET_BLOCK_LOCATIONS, OpKind.STAT, OpKind.LIST_DIR, OpKind.SET_PERMS,
                  OpKind.SET_OWNER, OpKind.SET_REPLICATION, OpKind.DELETE_FILE, OpKind.MOVE_FILE)


def budget_total(kind: OpKind, depth: int, cache_hit: bool) -> int:
    return sum(budget(kind, depth, cache_hit).values())


def savings_fraction(kind: OpKind, depth: int) -> float:
    cold = budget_total(kind, depth, False)
    return (cold - budget_total(kind, depth, True)) / cold
