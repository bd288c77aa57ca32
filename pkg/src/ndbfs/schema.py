"""Metadata tables, inode placement rules and id generation."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidConfig
from .ndbsim import EXCL, StoreCluster, TableDef, encode_key, hash64

ROOT_ID = 1
ROOT_PARENT_ID = 0
SUPERUSER = "hdfs"
SUPERGROUP = "supergroup"

INODE = "inode"
BLOCK = "block"
REPLICA = "replica"
URB = "urb"
PRB = "prb"
RUC = "ruc"
CR = "cr"
ER = "er"
INV = "inv"
LEASE = "lease"
QUOTA = "quota"
IDGEN = "idgen"
SUBTREE_OPS = "subtree_ops"
NAMENODES = "namenodes"

# Fixed read/lock order of file-related metadata after the owning inode.
RELATED_ORDER = (LEASE, QUOTA, BLOCK, REPLICA, URB, PRB, RUC, CR, ER, INV)
BLOCK_STATE_TABLES = (URB, PRB, RUC, CR, ER, INV)
FILE_RELATED_TABLES = (BLOCK, REPLICA, URB, PRB, RUC, CR, ER, INV, LEASE)

ID_KINDS = ("inode", "block", "subtree_op", "namenode")

TABLES = (
    TableDef(INODE, ("parent_id", "name"), "partition_key", frozenset({"id", "parent_id"})),
    TableDef(BLOCK, ("inode_id", "block_id"), "inode_id", frozenset({"block_id"})),
    TableDef(REPLICA, ("inode_id", "block_id", "storage_id"), "inode_id", frozenset({"block_id"})),
    TableDef(URB, ("inode_id", "block_id"), "inode_id"),
    TableDef(PRB, ("inode_id", "block_id"), "inode_id"),
    TableDef(RUC, ("inode_id", "block_id", "storage_id"), "inode_id"),
    TableDef(CR, ("inode_id", "block_id", "storage_id"), "inode_id"),
    TableDef(ER, ("inode_id", "block_id", "storage_id"), "inode_id"),
    TableDef(INV, ("inode_id", "block_id", "storage_id"), "inode_id"),
    TableDef(LEASE, ("inode_id",), "inode_id", frozenset({"holder"})),
    TableDef(QUOTA, ("inode_id",), "inode_id"),
    TableDef(IDGEN, ("kind",), "kind"),
    TableDef(SUBTREE_OPS, ("op_id",), "op_id", frozenset({"root_inode_id"})),
    TableDef(NAMENODES, ("namenode_id",), "namenode_id"),
)


@dataclass(frozen=True)
class PartitionPolicy:
    random_partition_depth: int = 2
    hash_seed: int = 0

    def __post_init__(self):
        if self.random_partition_depth < 1:
            raise InvalidConfig("random_partition_depth must be >= 1")

    def children_hashed(self, dir_depth: int) -> bool:
        return dir_depth + 1 <= self.random_partition_depth


def name_hash(parent_id: int, name: str, seed: int = 0) -> int:
    """64-bit hash of 8-byte big-endian parent id followed by UTF-8 name."""
    return hash64(parent_id.to_bytes(8, "big") + name.encode("utf-8"), seed)


def inode_partition_key(parent_id: int, name: str, depth: int, policy: PartitionPolicy = PartitionPolicy()):
    if depth < 1:
        raise ValueError("the root is never placed by the partitioning rule")
    if depth <= policy.random_partition_depth:
        return name_hash(parent_id, name, policy.hash_seed)
    return parent_id


def child_partition_key(parent: dict, name: str, policy: PartitionPolicy) -> int:
    """Placement of a new child, following the parent's stored placement mode.

    A directory keeps the placement its children got at creation even if the
    directory is later moved, so listing stays a single-partition scan.
    """
    if parent["hashed_children"]:
        return name_hash(parent["id"], name, policy.hash_seed)
    return parent["id"]


def make_inode(inode_id, parent_id, name, *, is_dir, depth, policy, parent=None,
               perms=None, owner=SUPERUSER, group=SUPERGROUP, replication=3, now=0.0):
    if parent is not None:
        pkey = child_partition_key(parent, name, policy)
    elif depth >= 1:
        pkey = inode_partition_key(parent_id, name, depth, policy)
    else:
        pkey = ROOT_PARENT_ID
    return {
        "id": inode_id,
        "parent_id": parent_id,
        "name": name,
        "partition_key": pkey,
        "is_dir": is_dir,
        "perms": (0o755 if is_dir else 0o644) if perms is None else perms,
        "owner": owner,
        "group": group,
        "replication": 0 if is_dir else replication,
        "subtree_lock_owner": None,
        "depth": depth,
        "size_hint": 0,
        "has_quota": False,
        "hashed_children": policy.children_hashed(depth) if is_dir else False,
        "mtime": now,
    }


def root_row(policy: PartitionPolicy = PartitionPolicy()) -> dict:
    row = make_inode(ROOT_ID, ROOT_PARENT_ID, "", is_dir=True, depth=0, policy=policy)
    row["has_quota"] = True
    return row


def quota_row(inode_id, ns_quota=-1, ds_quota=-1, ns_used=0, ds_used=0) -> dict:
    return {"inode_id": inode_id, "ns_quota": ns_quota, "ds_quota": ds_quota,
            "ns_used": ns_used, "ds_used": ds_used}


@dataclass(frozen=True)
class SchemaHandles:
    tables: dict
    policy: PartitionPolicy
    root: dict


def define_schema(store: StoreCluster, policy: PartitionPolicy = PartitionPolicy()) -> SchemaHandles:
    for t in TABLES:
        store.create_table(t)
    root = root_row(policy)
    tx = store.begin()
    try:
        store.read_pk(tx, INODE, (ROOT_PARENT_ID, ""), EXCL, part_key=ROOT_PARENT_ID)
        store.write(tx, INODE, root)
        store.read_pk(tx, QUOTA, (ROOT_ID,), EXCL)
        store.write(tx, QUOTA, quota_row(ROOT_ID, ns_used=0))
        for kind in ID_KINDS:
            store.read_pk(tx, IDGEN, (kind,), EXCL)
            store.write(tx, IDGEN, {"kind": kind, "next": ROOT_ID + 1 if kind == "inode" else 1})
        store.commit(tx)
    except BaseException:
        store.abort(tx)
        raise
    return SchemaHandles({t.name: t for t in TABLES}, policy, root)


def next_id(store: StoreCluster, tx, kind: str) -> int:
    """Exclusive-locked counter increment; aborted transactions may burn ids."""
    key = ("idgen", kind)
    if key in tx.scratch:
        value = tx.scratch[key]
        tx.write_buffer[:] = [w for w in tx.write_buffer
                              if not (w[0] == IDGEN and w[1]["kind"] == kind)]
    else:
        value = store.read_pk(tx, IDGEN, (kind,), EXCL)["next"]
    store.write(tx, IDGEN, {"kind": kind, "next": value + 1})
    tx.scratch[key] = value + 1
    return value


def next_inode_id(store, tx) -> int:
    return next_id(store, tx, "inode")


def next_block_id(store, tx) -> int:
    return next_id(store, tx, "block")
