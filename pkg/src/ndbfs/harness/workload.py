"""Operation mix sampling and synthetic namespace generation."""
from __future__ import annotations

import bisect
import random
import string
from dataclasses import dataclass, field

from .. import schema as S
from ..fsops import OpKind
from ..ndbsim import EXCL, StoreCluster

# Production mix; keys are OpKind values.
DEFAULT_MIX = {
    "GetBlockLocations": 0.6873,
    "Stat": 0.17,
    "ListDir": 0.09,
    "AddBlock": 0.015,
    "MoveFile": 0.013,
    "CreateFile": 0.012,
    "DeleteFile": 0.0075,
    "SetOwner": 0.0032,
    "SetReplication": 0.0014,
    "SetPerms": 0.0003,
    "Mkdirs": 0.0002,
    "ContentSummary": 0.0001,
    "Append": 0.0,
}

# Fraction of each operation that targets a directory rather than a file.
DEFAULT_DIR_RATIOS = {
    "ListDir": 0.945,
    "Stat": 0.233,
    "DeleteFile": 0.035,
    "MoveFile": 0.0003,
    "SetPerms": 0.263,
    "SetOwner": 1.0,
    "ContentSummary": 1.0,
    "Mkdirs": 1.0,
}

_RESIDUAL_KIND = "GetBlockLocations"


@dataclass
class WorkloadMix:
    probabilities: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    dir_ratios: dict = field(default_factory=lambda: dict(DEFAULT_DIR_RATIOS))

    def __post_init__(self):
        probs = {}
        for k, v in self.probabilities.items():
            OpKind(k)
            if v < 0:
                raise ValueError(f"negative probability for {k}")
            probs[k] = float(v)
        total = sum(probs.values())
        if total > 1 + 1e-9:
            raise ValueError(f"mix sums to {total} > 1")
        probs[_RESIDUAL_KIND] = probs.get(_RESIDUAL_KIND, 0.0) + (1.0 - total)
        self.probabilities = probs
        for k, v in self.dir_ratios.items():
            OpKind(k)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"directory ratio for {k} out of range")
        self._kinds = sorted(k for k, v in probs.items() if v > 0)
        acc = 0.0
        self._cdf = []
        for k in self._kinds:
            acc += probs[k]
            self._cdf.append(acc)

    @classmethod
    def write_intensive(cls, create_share: float = 0.20) -> "WorkloadMix":
        """The default mix with CreateFile raised and the read share reduced to match."""
        probs = dict(DEFAULT_MIX)
        delta = create_share - probs["CreateFile"]
        probs["CreateFile"] = create_share
        probs["GetBlockLocations"] -= delta
        return cls(probs)

    def total(self) -> float:
        return sum(self.probabilities.values())

    def sample(self, rng: random.Random) -> OpKind:
        u = rng.random() * self._cdf[-1]
        i = min(bisect.bisect_right(self._cdf, u), len(self._kinds) - 1)
        return OpKind(self._kinds[i])

    def targets_dir(self, kind: OpKind, rng: random.Random) -> bool:
        return rng.random() < self.dir_ratios.get(kind.value, 0.0)

    def to_dict(self) -> dict:
        return {"probabilities": dict(self.probabilities), "dir_ratios": dict(self.dir_ratios)}


def realized_frequencies(mix: WorkloadMix, n: int, seed: int = 0) -> dict:
    rng = random.Random(seed)
    counts = {k: 0 for k in mix.probabilities}
    for _ in range(n):
        counts[mix.sample(rng).value] += 1
    return {k: c / n for k, c in counts.items()} if n else {k: 0.0 for k in counts}


# ---------------------------------------------------------------- namespace


@dataclass
class NamespaceGenConfig:
    """Means of the generated tree.

    ``subdirs_per_dir`` is the mean over directories that have subdirectories;
    over all directories of a finite tree the mean is necessarily below one.
    """
    target_inodes: int = 2000
    files_per_dir: float = 16.0
    subdirs_per_dir: float = 2.0
    mean_depth: float = 7.0
    name_length: float = 34.0
    blocks_per_file: int = 1
    replication: int = 3
    base: str = "/"
    seed: int = 0


_ALPHABET = string.ascii_lowercase + string.digits


def _spread(rng: random.Random, mean: float) -> int:
    """Integer draw with the given mean, uniform over [mean/2, 3*mean/2]."""
    if mean <= 0:
        return 0
    lo = mean / 2.0
    x = lo + rng.random() * mean
    base = int(x)
    return base + (1 if rng.random() < x - base else 0)


def _name(rng: random.Random, mean_len: float, tag: int) -> str:
    n = max(len(str(tag)) + 2, _spread(rng, mean_len))
    suffix = f"-{tag}"
    return "".join(rng.choice(_ALPHABET) for _ in range(n - len(suffix))) + suffix


@dataclass
class NamespaceStats:
    inodes: int = 0
    files: int = 0
    dirs: int = 0
    mean_depth: float = 0.0
    mean_files_per_dir: float = 0.0
    mean_subdirs_per_internal_dir: float = 0.0
    mean_name_length: float = 0.0
    file_paths: list = field(default_factory=list, repr=False)
    dir_paths: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("inodes", "files", "dirs", "mean_depth",
                                              "mean_files_per_dir",
                                              "mean_subdirs_per_internal_dir",
                                              "mean_name_length")}


def _leaf_depth(mean_depth: float, subdirs: float) -> int:
    # files of the deepest directories dominate, so the leaf level tracks the mean
    return max(1, int(mean_depth + 0.5))


class _Writer:
    """Inserts generated rows in one transaction per directory."""

    def __init__(self, store: StoreCluster):
        self.store = store

    def insert(self, rows: list) -> None:
        store = self.store
        tx = store.begin()
        try:
            keys = []
            for table, row in rows:
                pk = store.table(table).pk_of(row)
                pkey = row.get("partition_key") if table == S.INODE else None
                keys.append((table, pk, EXCL, pkey))
            if keys:
                store.batch_read_pk(tx, keys)
            for table, row in rows:
                store.write(tx, table, row)
            store.commit(tx)
        except BaseException:
            store.abort(tx)
            raise

    def alloc(self, kind: str, n: int) -> int:
        """Reserve ``n`` consecutive ids and return the first."""
        store = self.store
        tx = store.begin()
        try:
            row = store.read_pk(tx, S.IDGEN, (kind,), EXCL)
            store.write(tx, S.IDGEN, {"kind": kind, "next": row["next"] + n})
            store.commit(tx)
            return row["next"]
        except BaseException:
            store.abort(tx)
            raise

    def add_usage(self, ns: int) -> None:
        store = self.store
        tx = store.begin()
        try:
            q = store.read_pk(tx, S.QUOTA, (S.ROOT_ID,), EXCL)
            store.write(tx, S.QUOTA, dict(q, ns_used=q["ns_used"] + ns))
            store.commit(tx)
        except BaseException:
            store.abort(tx)
            raise


def generate_namespace(store: StoreCluster, cfg: NamespaceGenConfig = NamespaceGenConfig(),
                       policy: S.PartitionPolicy = S.PartitionPolicy()) -> NamespaceStats:
    """Populate the store below ``cfg.base`` (which must exist as a directory).

    Top-level subtrees are added until ``target_inodes`` is reached; each is a
    tree whose directories branch ``subdirs_per_dir`` ways on average down to a
    fixed depth chosen from ``mean_depth``.  Deterministic for a given seed.
    """
    rng = random.Random(cfg.seed)
    w = _Writer(store)
    stats = NamespaceStats()
    base_row, base_depth = _lookup_dir(store, cfg.base, policy)
    leaf = max(base_depth + 1, _leaf_depth(cfg.mean_depth, cfg.subdirs_per_dir))
    depth_sum = 0
    name_sum = 0
    files_in_dirs = []
    subdirs_in_internal = []
    tag = 0
    if cfg.files_per_dir <= 0 and cfg.subdirs_per_dir <= 0:
        return stats

    def make(parent, name, is_dir, depth, inode_id):
        return S.make_inode(inode_id, parent["id"], name, is_dir=is_dir, depth=depth,
                            policy=policy, parent=parent, replication=cfg.replication)

    pending_top = True
    while stats.inodes < cfg.target_inodes and pending_top:
        # one top-level directory under the base, expanded breadth first
        tag += 1
        first = w.alloc("inode", 1)
        top = make(base_row, _name(rng, cfg.name_length, tag), True, base_depth + 1, first)
        w.insert([(S.INODE, top)])
        stats.inodes += 1
        stats.dirs += 1
        depth_sum += top["depth"]
        name_sum += len(top["name"])
        top_path = _join(cfg.base, top["name"])
        stats.dir_paths.append(top_path)
        frontier = [(top, top_path)]
        if cfg.subdirs_per_dir <= 0 and cfg.files_per_dir <= 0:
            pending_top = False
        while frontier and stats.inodes < cfg.target_inodes:
            nxt = []
            for d, dpath in frontier:
                if stats.inodes >= cfg.target_inodes:
                    break
                nfiles = _spread(rng, cfg.files_per_dir)
                nsub = _spread(rng, cfg.subdirs_per_dir) if d["depth"] < leaf else 0
                if cfg.subdirs_per_dir > 0 and d["depth"] < leaf:
                    nsub = max(1, nsub)
                n = min(nfiles + nsub, max(0, cfg.target_inodes - stats.inodes))
                nsub = min(nsub, n)
                nfiles = n - nsub
                start = w.alloc("inode", n) if n else 0
                rows = []
                blocks = []
                used = set()
                for k in range(n):
                    tag += 1
                    name = _name(rng, cfg.name_length, tag)
                    while name in used:
                        tag += 1
                        name = _name(rng, cfg.name_length, tag)
                    used.add(name)
                    is_dir = k < nsub
                    row = make(d, name, is_dir, d["depth"] + 1, start + k)
                    rows.append((S.INODE, row))
                    p = _join(dpath, name)
                    depth_sum += row["depth"]
                    name_sum += len(name)
                    if is_dir:
                        nxt.append((row, p))
                        stats.dir_paths.append(p)
                    else:
                        stats.file_paths.append(p)
                        blocks.append(row)
                if blocks and cfg.blocks_per_file:
                    bstart = w.alloc("block", len(blocks) * cfg.blocks_per_file)
                    b = bstart
                    for f in blocks:
                        for idx in range(cfg.blocks_per_file):
                            rows.append((S.BLOCK, {"inode_id": f["id"], "block_id": b,
                                                   "index_in_file": idx, "generation": 1,
                                                   "num_bytes": 0}))
                            for r in range(cfg.replication):
                                rows.append((S.REPLICA, {"inode_id": f["id"], "block_id": b,
                                                         "storage_id": (b * cfg.replication + r) % 24}))
                            b += 1
                if rows:
                    w.insert(rows)
                stats.inodes += n
                stats.dirs += nsub
                stats.files += nfiles
                files_in_dirs.append(nfiles)
                if nsub:
                    subdirs_in_internal.append(nsub)
            frontier = nxt
    # directories never expanded still count towards the per-directory means
    files_in_dirs.extend([0] * (stats.dirs - len(files_in_dirs)))
    w.add_usage(stats.inodes)
    if stats.inodes:
        stats.mean_depth = depth_sum / stats.inodes
        stats.mean_name_length = name_sum / stats.inodes
    if files_in_dirs:
        stats.mean_files_per_dir = sum(files_in_dirs) / len(files_in_dirs)
    if subdirs_in_internal:
        stats.mean_subdirs_per_internal_dir = sum(subdirs_in_internal) / len(subdirs_in_internal)
    return stats


def _join(base: str, name: str) -> str:
    return (base.rstrip("/") or "") + "/" + name


def _lookup_dir(store: StoreCluster, path: str, policy: S.PartitionPolicy):
    from ..nncore import split_path
    row = S.root_row(policy)
    comps = split_path(path)
    for c in comps:
        nxt = store.peek(S.INODE, (row["id"], c))
        if nxt is None or not nxt["is_dir"]:
            raise ValueError(f"generation base {path} is not a directory")
        row = nxt
    return row, len(comps)
