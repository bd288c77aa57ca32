"""In-process simulation of a shared-nothing, partitioned, transactional store.

Tables are hash partitioned on an application chosen field, partitions are
spread round-robin over node groups of ``replication_degree`` datanodes, and
transactions get read-committed reads plus Shared/Exclusive row locks.  Every
store call is charged to a per-transaction :class:`RoundTripLedger`; nothing is
sent over a network.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
import json
import random
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from .errors import (DuplicateTable, InvalidConfig, LockNotHeld, LockUpgrade,
                     Timeout, TxInactive, Unavailable, UnknownTable)

DEFAULT_LOCK_WAIT_MS = 1200.0

OP_CLASSES = ("PK_rc", "PK_shared", "PK_excl", "PK_w", "Batch", "PPIS", "IS", "FTS")


class LockMode(enum.Enum):
    READ_COMMITTED = "rc"
    SHARED = "shared"
    EXCLUSIVE = "excl"

    @property
    def pk_class(self) -> str:
        return {"rc": "PK_rc", "shared": "PK_shared", "excl": "PK_excl"}[self.value]


RC = LockMode.READ_COMMITTED
SHARED = LockMode.SHARED
EXCL = LockMode.EXCLUSIVE


class BatchFlushMode(enum.Enum):
    PER_ROW = "PerRow"
    GROUPED = "Grouped"


class TxState(enum.Enum):
    ACTIVE = "Active"
    COMMITTED = "Committed"
    ABORTED = "Aborted"


# --------------------------------------------------------------------- clocks

class SimClock:
    """Simulated milliseconds; time only moves when someone sleeps."""

    simulated = True

    def __init__(self, start_ms: float = 0.0):
        self._now = float(start_ms)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now

    def sleep(self, ms: float) -> None:
        with self._lock:
            self._now += max(0.0, float(ms))

    advance = sleep

    def real_seconds(self, ms: float) -> float:
        return 0.0


class WallClock:
    """Wall time reported in simulated ms; ``scale`` real seconds per simulated second."""

    simulated = False

    def __init__(self, scale: float = 1.0):
        self.scale = scale
        self._t0 = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0 / self.scale

    def real_seconds(self, ms: float) -> float:
        return ms / 1000.0 * self.scale

    def sleep(self, ms: float) -> None:
        time.sleep(self.real_seconds(ms))

    def advance(self, ms: float) -> None:
        # wall time cannot be pushed forward
        pass


# ---------------------------------------------------------------- hashing

def encode_key(value: Any) -> bytes:
    """Canonical byte encoding of a partition-key value.

    ints are 8-byte big-endian (two's complement), strings UTF-8, bytes as is,
    tuples are the concatenation of their encoded members.
    """
    if isinstance(value, bool):
        return b"\x01" if value else b"\x00"
    if isinstance(value, int):
        return (value & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, bytes):
        return value
    if isinstance(value, tuple):
        return b"".join(encode_key(v) for v in value)
    if value is None:
        return b""
    raise TypeError(f"cannot encode partition key {value!r}")


def hash64(data: bytes, seed: int = 0) -> int:
    h = hashlib.blake2b(data, digest_size=8, key=seed.to_bytes(8, "big"))
    return int.from_bytes(h.digest(), "big")


# -------------------------------------------------------------- data types

@dataclass(frozen=True)
class ClusterConfig:
    num_datanodes: int = 12
    replication_degree: int = 2
    partitions_per_table: int = 12
    lock_wait_timeout: float = DEFAULT_LOCK_WAIT_MS
    batch_flush_mode: BatchFlushMode = BatchFlushMode.PER_ROW
    hash_seed: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.num_datanodes <= 0 or self.replication_degree <= 0 or self.partitions_per_table <= 0:
            raise InvalidConfig("counts must be positive")
        if self.num_datanodes % self.replication_degree:
            raise InvalidConfig(
                f"{self.num_datanodes} datanodes do not split into groups of {self.replication_degree}")
        if self.lock_wait_timeout <= 0:
            raise InvalidConfig("lock_wait_timeout must be positive")

    @property
    def num_node_groups(self) -> int:
        return self.num_datanodes // self.replication_degree


@dataclass(frozen=True)
class TableDef:
    name: str
    pk_fields: tuple
    partition_key_field: str
    indexed_fields: frozenset = frozenset()

    def pk_of(self, row: dict) -> tuple:
        try:
            return tuple(row[f] for f in self.pk_fields)
        except KeyError as e:
            raise ValueError(f"row for {self.name} lacks pk field {e}") from None


@dataclass
class NodeGroup:
    group_id: int
    member_datanode_ids: tuple
    alive_members: set = field(default_factory=set)

    def alive(self) -> bool:
        return bool(self.alive_members)


class RoundTripLedger:
    """Per-transaction round-trip counts by operation class."""

    def __init__(self, counts: Optional[dict] = None):
        self.counts = Counter({c: 0 for c in OP_CLASSES})
        if counts:
            self.counts.update(counts)

    def add(self, op_class: str, n: int = 1) -> None:
        if op_class not in OP_CLASSES:
            raise ValueError(op_class)
        self.counts[op_class] += n

    def __getitem__(self, op_class: str) -> int:
        return self.counts[op_class]

    def total(self) -> int:
        return sum(self.counts.values())

    def as_dict(self) -> dict:
        return {c: self.counts[c] for c in OP_CLASSES}

    def merged(self, other: "RoundTripLedger") -> "RoundTripLedger":
        out = RoundTripLedger(self.counts)
        out.counts.update(other.counts)
        return out

    def __eq__(self, other):
        if isinstance(other, RoundTripLedger):
            return self.as_dict() == other.as_dict()
        if isinstance(other, dict):
            return self.as_dict() == RoundTripLedger(other).as_dict()
        return NotImplemented

    def __repr__(self):
        nz = {k: v for k, v in self.as_dict().items() if v}
        return f"RoundTripLedger({nz})"


@dataclass
class TxContext:
    tx_id: int
    hint: Optional[tuple]
    coordinator_group: int
    held_locks: dict = field(default_factory=dict)       # (table, pk) -> LockMode
    lock_log: list = field(default_factory=list)         # (table, pk, LockMode) in grant order
    write_buffer: list = field(default_factory=list)     # (table, row, kind)
    ledger: RoundTripLedger = field(default_factory=RoundTripLedger)
    state: TxState = TxState.ACTIVE
    local_ops: int = 0
    remote_ops: int = 0
    touched_partitions: set = field(default_factory=set)  # (table, pid)
    lock_partitions: list = field(default_factory=list)   # (table, pid) per locking PK read
    scratch: dict = field(default_factory=dict)


@dataclass
class _LockState:
    shared: set = field(default_factory=set)
    excl: Optional[int] = None

    def idle(self) -> bool:
        return not self.shared and self.excl is None


class _Table:
    def __init__(self, defn: TableDef, nparts: int):
        self.defn = defn
        self.rows: dict = {}
        self.part_of: dict = {}
        self.by_part: list = [dict() for _ in range(nparts)]


# ------------------------------------------------------------------- store

class StoreCluster:
    """The simulated store.  Internally synchronized; one TxContext per worker."""

    def __init__(self, config: ClusterConfig, clock=None):
        config.validate()
        self.config = config
        self.clock = clock or SimClock()
        g = config.num_node_groups
        r = config.replication_degree
        self.node_groups = [
            NodeGroup(i, tuple(range(i * r, (i + 1) * r)), set(range(i * r, (i + 1) * r)))
            for i in range(g)
        ]
        self._dn_group = {dn: ng.group_id for ng in self.node_groups for dn in ng.member_datanode_ids}
        self._tables: dict[str, _Table] = {}
        self._locks: dict = {}
        self._cond = threading.Condition(threading.RLock())
        self._tx_ids = itertools.count(1)
        self._active: dict[int, TxContext] = {}
        self._rng = random.Random(config.seed)

    # ---- topology

    @property
    def num_node_groups(self) -> int:
        return len(self.node_groups)

    def group_of_partition(self, pid: int) -> NodeGroup:
        return self.node_groups[pid % len(self.node_groups)]

    def kill_datanode(self, dn: int) -> None:
        with self._cond:
            self.node_groups[self._dn_group[dn]].alive_members.discard(dn)
            self._cond.notify_all()

    def revive_datanode(self, dn: int) -> None:
        with self._cond:
            self.node_groups[self._dn_group[dn]].alive_members.add(dn)
            self._cond.notify_all()

    def partition_available(self, pid: int) -> bool:
        return self.group_of_partition(pid).alive()

    # ---- tables

    def create_table(self, defn: TableDef) -> TableDef:
        with self._cond:
            if defn.name in self._tables:
                raise DuplicateTable(defn.name)
            self._tables[defn.name] = _Table(defn, self.config.partitions_per_table)
            return defn

    def table(self, name: str) -> TableDef:
        return self._t(name).defn

    def table_names(self) -> list:
        return list(self._tables)

    def _t(self, name: str) -> _Table:
        try:
            return self._tables[name]
        except KeyError:
            raise UnknownTable(name) from None

    def partition_of(self, table: str, value: Any) -> int:
        self._t(table)
        return hash64(encode_key(value), self.config.hash_seed) % self.config.partitions_per_table

    def _locate(self, t: _Table, pk: tuple, part_key: Any = None) -> int:
        if pk in t.part_of:
            return t.part_of[pk]
        d = t.defn
        if part_key is None and d.partition_key_field in d.pk_fields:
            part_key = pk[d.pk_fields.index(d.partition_key_field)]
        if part_key is None:
            part_key = pk
        return self.partition_of(d.name, part_key)

    # ---- transactions

    def begin(self, hint: Optional[tuple] = None) -> TxContext:
        """Start a transaction; ``hint`` is ``(table, partition_key_value)``."""
        with self._cond:
            if hint is not None:
                pid = self.partition_of(hint[0], hint[1])
                grp = self.group_of_partition(pid)
                if not grp.alive():
                    raise Unavailable(f"hinted partition {pid} of {hint[0]} is down")
                coord = grp.group_id
            else:
                alive = [g.group_id for g in self.node_groups if g.alive()]
                if not alive:
                    raise Unavailable("no node group alive")
                coord = self._rng.choice(alive)
            tx = TxContext(next(self._tx_ids), hint, coord)
            self._active[tx.tx_id] = tx
            return tx

    def _check_active(self, tx: TxContext) -> None:
        if tx.state is not TxState.ACTIVE:
            raise TxInactive(f"tx {tx.tx_id} is {tx.state.value}")

    def _touch(self, tx: TxContext, table: str, pid: int) -> None:
        if not self.partition_available(pid):
            self._abort_locked(tx)
            raise Unavailable(f"partition {pid} of {table} is down")
        tx.touched_partitions.add((table, pid))
        if self.group_of_partition(pid).group_id == tx.coordinator_group:
            tx.local_ops += 1
        else:
            tx.remote_ops += 1

    def _touch_all(self, tx: TxContext, table: str) -> None:
        for pid in range(self.config.partitions_per_table):
            if not self.partition_available(pid):
                self._abort_locked(tx)
                raise Unavailable(f"partition {pid} of {table} is down")
        tx.remote_ops += 1

    @staticmethod
    def _conflicts(st: _LockState, tx_id: int, mode: LockMode) -> bool:
        if mode is SHARED:
            return st.excl is not None and st.excl != tx_id
        return (st.excl is not None and st.excl != tx_id) or bool(st.shared - {tx_id})

    def _acquire(self, tx: TxContext, key: tuple, mode: LockMode) -> None:
        if mode is RC:
            return
        held = tx.held_locks.get(key)
        if held is EXCL or held is mode:
            return
        if held is SHARED and mode is EXCL:
            self._abort_locked(tx)
            raise LockUpgrade(f"tx {tx.tx_id} tried to upgrade {key}")
        st = self._locks.setdefault(key, _LockState())
        if self._conflicts(st, tx.tx_id, mode):
            timeout = self.config.lock_wait_timeout
            if self.clock.simulated:
                # a single simulated worker cannot be unblocked by anyone
                self.clock.sleep(timeout)
                self._abort_locked(tx)
                raise Timeout(f"tx {tx.tx_id} timed out on {key}")
            deadline = time.monotonic() + self.clock.real_seconds(timeout)
            while self._conflicts(st, tx.tx_id, mode):
                remaining = deadline - time.monotonic()
                if remaining <= 0 or tx.state is not TxState.ACTIVE:
                    self._abort_locked(tx)
                    raise Timeout(f"tx {tx.tx_id} timed out on {key}")
                self._cond.wait(remaining)
                st = self._locks.setdefault(key, st)
        if mode is EXCL:
            st.excl = tx.tx_id
            st.shared.discard(tx.tx_id)
        else:
            st.shared.add(tx.tx_id)
        tx.held_locks[key] = mode
        tx.lock_log.append((key[0], key[1], mode))

    def _read_one(self, tx, t: _Table, pk: tuple, mode: LockMode, part_key=None):
        pid = self._locate(t, pk, part_key)
        self._touch(tx, t.defn.name, pid)
        self._acquire(tx, (t.defn.name, pk), mode)
        if mode is not RC:
            tx.lock_partitions.append((t.defn.name, pid))
        row = t.rows.get(pk)
        return dict(row) if row is not None else None

    def read_pk(self, tx: TxContext, table: str, pk: tuple, mode: LockMode = RC,
                part_key: Any = None) -> Optional[dict]:
        with self._cond:
            self._check_active(tx)
            t = self._t(table)
            row = self._read_one(tx, t, tuple(pk), mode, part_key)
            tx.ledger.add(mode.pk_class)
            return row

    def batch_read_pk(self, tx: TxContext, items: list, mode: LockMode = RC) -> list:
        """One round trip for any number of primary-key lookups.

        ``items`` holds ``(table, pk)`` or ``(table, pk, mode_or_None, part_key)``
        tuples; a per-item mode overrides ``mode``.  Locks are taken in list order.
        """
        if not items:
            raise ValueError("empty batch")
        with self._cond:
            self._check_active(tx)
            out = []
            for it in items:
                table, pk = it[0], tuple(it[1])
                m = it[2] if len(it) > 2 and it[2] is not None else mode
                pkey = it[3] if len(it) > 3 else None
                out.append(self._read_one(tx, self._t(table), pk, m, pkey))
            tx.ledger.add("Batch")
            return out

    @staticmethod
    def _project(row: dict, projection):
        if projection is None:
            return dict(row)
        return {f: row[f] for f in projection if f in row}

    def scan_partition(self, tx: TxContext, table: str, partition_key_value: Any,
                       predicate: Optional[Callable] = None, mode: LockMode = RC,
                       projection: Optional[Iterable] = None) -> list:
        """Partition pruned index scan over rows whose partition key equals the value."""
        with self._cond:
            self._check_active(tx)
            t = self._t(table)
            pid = self.partition_of(table, partition_key_value)
            self._touch(tx, table, pid)
            pkf = t.defn.partition_key_field
            out = []
            hits = [pk for pk in t.by_part[pid]
                    if t.rows[pk].get(pkf) == partition_key_value
                    and (predicate is None or predicate(t.rows[pk]))]
            for pk in _sorted_pks(hits):
                self._acquire(tx, (table, pk), mode)
                row = t.rows.get(pk)  # may have changed while waiting for the lock
                if row is not None and row.get(pkf) == partition_key_value \
                        and (predicate is None or predicate(row)):
                    out.append(self._project(row, projection))
            tx.ledger.add("PPIS")
            return out

    def _scan_all(self, tx, table, predicate, mode, projection, op_class):
        with self._cond:
            self._check_active(tx)
            t = self._t(table)
            self._touch_all(tx, table)
            out = []
            hits = [pk for pk, row in t.rows.items() if predicate is None or predicate(row)]
            for pk in _sorted_pks(hits):
                self._acquire(tx, (table, pk), mode)
                row = t.rows.get(pk)
                if row is not None and (predicate is None or predicate(row)):
                    out.append(self._project(row, projection))
            tx.ledger.add(op_class)
            return out

    def scan_index(self, tx: TxContext, table: str, predicate: Optional[Callable] = None,
                   mode: LockMode = RC, projection=None) -> list:
        return self._scan_all(tx, table, predicate, mode, projection, "IS")

    def scan_full(self, tx: TxContext, table: str, mode: LockMode = RC) -> list:
        return self._scan_all(tx, table, None, mode, None, "FTS")

    def write(self, tx: TxContext, table: str, row: dict, kind: str = "upsert",
              covered_by: Optional[tuple] = None) -> None:
        """Buffer an upsert/delete.  Requires an Exclusive lock on the row's pk
        (an absence lock for inserts) or on ``covered_by`` = ``(table, pk)``,
        the owning row under hierarchical locking."""
        if kind not in ("upsert", "delete"):
            raise ValueError(kind)
        with self._cond:
            self._check_active(tx)
            t = self._t(table)
            pk = t.defn.pk_of(row)
            if tx.held_locks.get((table, pk)) is not EXCL:
                if covered_by is None or tx.held_locks.get((covered_by[0], tuple(covered_by[1]))) is not EXCL:
                    raise LockNotHeld(f"tx {tx.tx_id} holds no exclusive lock on {table}{pk}")
            tx.write_buffer.append((table, dict(row), kind))

    def commit(self, tx: TxContext) -> None:
        with self._cond:
            self._check_active(tx)
            targets = []
            for table, row, kind in tx.write_buffer:
                t = self._t(table)
                pk = t.defn.pk_of(row)
                if kind == "upsert":
                    pid = self.partition_of(table, row.get(t.defn.partition_key_field))
                else:
                    pid = self._locate(t, pk)
                targets.append((t, pk, pid, row, kind))
                old = t.part_of.get(pk)
                for p in {pid, old} - {None}:
                    if not self.partition_available(p):
                        self._abort_locked(tx)
                        raise Unavailable(f"commit target partition {p} of {table} is down")
            for t, pk, pid, row, kind in targets:
                old = t.part_of.pop(pk, None)
                if old is not None:
                    t.by_part[old].pop(pk, None)
                t.rows.pop(pk, None)
                if kind == "upsert":
                    t.rows[pk] = dict(row)
                    t.part_of[pk] = pid
                    t.by_part[pid][pk] = None
            if self.config.batch_flush_mode is BatchFlushMode.PER_ROW:
                tx.ledger.add("PK_w", len(targets))
            else:
                tx.ledger.add("PK_w", len({(t.defn.name, pid) for t, _, pid, _, _ in targets}))
            tx.state = TxState.COMMITTED
            self._release(tx)

    def abort(self, tx: TxContext) -> None:
        with self._cond:
            if tx.state is TxState.ACTIVE:
                self._abort_locked(tx)

    def _abort_locked(self, tx: TxContext) -> None:
        if tx.state is not TxState.ACTIVE:
            return
        tx.write_buffer.clear()
        tx.state = TxState.ABORTED
        self._release(tx)

    def _release(self, tx: TxContext) -> None:
        for key in tx.held_locks:
            st = self._locks.get(key)
            if st is None:
                continue
            st.shared.discard(tx.tx_id)
            if st.excl == tx.tx_id:
                st.excl = None
            if st.idle():
                del self._locks[key]
        tx.held_locks = {}
        self._active.pop(tx.tx_id, None)
        self._cond.notify_all()

    # ---- introspection (no ledger charge)

    def lock_holders(self, table: str, pk: tuple) -> dict:
        with self._cond:
            st = self._locks.get((table, tuple(pk)))
            if st is None:
                return {}
            out = {t: SHARED for t in st.shared}
            if st.excl is not None:
                out[st.excl] = EXCL
            return out

    def held_lock_count(self) -> int:
        with self._cond:
            return len(self._locks)

    def active_transactions(self) -> list:
        with self._cond:
            return list(self._active.values())

    def peek(self, table: str, pk: tuple) -> Optional[dict]:
        with self._cond:
            row = self._t(table).rows.get(tuple(pk))
            return dict(row) if row is not None else None

    def rows(self, table: str) -> list:
        with self._cond:
            t = self._t(table)
            return [dict(t.rows[pk]) for pk in _sorted_pks(t.rows)]

    def row_partition(self, table: str, pk: tuple) -> Optional[int]:
        with self._cond:
            return self._t(table).part_of.get(tuple(pk))

    def partition_rows(self, table: str, pid: int) -> list:
        with self._cond:
            t = self._t(table)
            return [dict(t.rows[pk]) for pk in _sorted_pks(t.by_part[pid])]

    def dump(self) -> dict:
        """Debug dump: tables -> partitions -> rows (JSON-serialisable)."""
        with self._cond:
            out = {}
            for name, t in sorted(self._tables.items()):
                parts = {}
                for pid, pks in enumerate(t.by_part):
                    if pks:
                        parts[str(pid)] = [t.rows[pk] for pk in _sorted_pks(pks)]
                out[name] = parts
            return out

    def dump_json(self, **kw) -> str:
        return json.dumps(self.dump(), sort_keys=True, **kw)


def _sort_key(pk):
    return tuple((0, v) if isinstance(v, (int, float)) else (1, str(v)) for v in pk)


def _sorted_pks(pks) -> list:
    """Primary keys in a deterministic order; native tuple order unless types mix."""
    pks = list(pks)
    try:
        return sorted(pks)
    except TypeError:
        return sorted(pks, key=_sort_key)


def new_cluster(config: ClusterConfig, clock=None) -> StoreCluster:
    return StoreCluster(config, clock)
