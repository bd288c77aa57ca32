"""Offline namespace checker over a store dump.  Run only on a quiescent store."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .. import schema as S
from ..ndbsim import StoreCluster


@dataclass
class FsckReport:
    violations: list = field(default_factory=list)
    inodes: int = 0
    files: int = 0
    dirs: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"ok": self.ok, "inodes": self.inodes, "files": self.files, "dirs": self.dirs,
                "violations": list(self.violations)}


def fsck(store: StoreCluster, policy: S.PartitionPolicy = S.PartitionPolicy(),
         alive_namenodes: Optional[set] = None) -> FsckReport:
    """Check structural invariants.

    ``alive_namenodes`` enables the subtree-flag check: a flag owned by a live
    namenode must have a matching operation record.
    """
    rep = FsckReport()
    v = rep.violations
    inodes = store.rows(S.INODE)
    by_id = {}
    for r in inodes:
        if r["id"] in by_id:
            v.append(f"duplicate inode id {r['id']}")
        by_id[r["id"]] = r
    roots = [r for r in inodes if r["parent_id"] == S.ROOT_PARENT_ID]
    if len(roots) != 1 or roots[0]["id"] != S.ROOT_ID or roots[0]["name"] != "":
        v.append(f"expected a single root, found {[r['id'] for r in roots]}")
    seen_pk = set()
    for r in inodes:
        pk = (r["parent_id"], r["name"])
        if pk in seen_pk:
            v.append(f"duplicate (parent, name) {pk}")
        seen_pk.add(pk)
        if r["id"] == S.ROOT_ID:
            continue
        parent = by_id.get(r["parent_id"])
        if parent is None:
            v.append(f"inode {r['id']} has missing parent {r['parent_id']}")
            continue
        if not parent["is_dir"]:
            v.append(f"inode {r['id']} has a file as parent")
        if not r["name"] or "/" in r["name"]:
            v.append(f"inode {r['id']} has an invalid name {r['name']!r}")
        want = S.child_partition_key(parent, r["name"], policy)
        if r["partition_key"] != want:
            v.append(f"inode {r['id']} has partition key {r['partition_key']} instead of {want}")
        part = store.row_partition(S.INODE, pk)
        if part != store.partition_of(S.INODE, r["partition_key"]):
            v.append(f"inode {r['id']} is stored on the wrong partition")
    # connectivity and acyclicity
    state = {S.ROOT_ID: True}
    for r in inodes:
        chain = []
        cur = r
        ok = None
        while cur is not None:
            if cur["id"] in state:
                ok = state[cur["id"]]
                break
            if cur["id"] in chain:
                ok = False
                v.append(f"cycle through inode {cur['id']}")
                break
            chain.append(cur["id"])
            cur = by_id.get(cur["parent_id"])
        if ok is None:
            ok = False
        for i in chain:
            state[i] = ok
    for r in inodes:
        if not state.get(r["id"], False):
            v.append(f"inode {r['id']} is not reachable from the root")
    for r in inodes:
        rep.inodes += 1
        if r["is_dir"]:
            rep.dirs += 1
        else:
            rep.files += 1
    # file-related rows
    files = {i for i, r in by_id.items() if not r["is_dir"]}
    blocks = {}
    for b in store.rows(S.BLOCK):
        if b["inode_id"] not in files:
            v.append(f"block {b['block_id']} belongs to missing file {b['inode_id']}")
        blocks[b["block_id"]] = b
    for t in (S.REPLICA,) + S.BLOCK_STATE_TABLES:
        for r in store.rows(t):
            b = blocks.get(r["block_id"])
            if b is None or b["inode_id"] != r["inode_id"]:
                v.append(f"{t} row {r['block_id']}/{r.get('storage_id')} has no owning block")
    for l in store.rows(S.LEASE):
        if l["inode_id"] not in files:
            v.append(f"lease on missing file {l['inode_id']}")
    for q in store.rows(S.QUOTA):
        owner = by_id.get(q["inode_id"])
        if owner is None or not owner["is_dir"] or not owner["has_quota"]:
            v.append(f"quota row for {q['inode_id']} has no quota directory")
    for r in inodes:
        if r["has_quota"] and store.peek(S.QUOTA, (r["id"],)) is None:
            v.append(f"directory {r['id']} has a quota flag but no quota row")
    # subtree flags and records
    records = store.rows(S.SUBTREE_OPS)
    by_root = {}
    for rec in records:
        by_root.setdefault(rec["root_inode_id"], []).append(rec)
    for r in inodes:
        owner = r.get("subtree_lock_owner")
        if owner is None:
            continue
        if alive_namenodes is not None and owner in alive_namenodes and r["id"] not in by_root:
            v.append(f"inode {r['id']} flagged by live namenode {owner} without a record")
    paths = [rec["root_path"] for rec in records]
    for i, a in enumerate(paths):
        for b in paths[i + 1:]:
            if a == b or b.startswith(a.rstrip("/") + "/") or a.startswith(b.rstrip("/") + "/"):
                v.append(f"active subtree roots {a} and {b} overlap")
    if store.held_lock_count():
        v.append(f"{store.held_lock_count()} row locks still held")
    if store.active_transactions():
        v.append(f"{len(store.active_transactions())} transactions still active")
    return rep


def namespace_of(store: StoreCluster) -> dict:
    """Absolute path -> (is_dir, perms, owner, group, replication) for every reachable inode."""
    inodes = store.rows(S.INODE)
    children = {}
    for r in inodes:
        children.setdefault(r["parent_id"], []).append(r)
    out = {}
    stack = [(S.ROOT_ID, "")]
    while stack:
        pid, base = stack.pop()
        for c in children.get(pid, []):
            if c["id"] == S.ROOT_ID:
                continue
            p = base + "/" + c["name"]
            out[p] = (c["is_dir"], c["perms"], c["owner"], c["group"], c["replication"])
            if c["is_dir"]:
                stack.append((c["id"], p))
    return out
