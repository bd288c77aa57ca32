import threading
import time
from collections import Counter

import pytest

from ndbfs.errors import (DuplicateTable, InvalidConfig, LockNotHeld, LockUpgrade, Timeout,
                          TxInactive, Unavailable)
from ndbfs.ndbsim import (EXCL, RC, SHARED, BatchFlushMode, ClusterConfig, SimClock, TableDef,
                          WallClock, encode_key, new_cluster)

KV = TableDef("kv", ("k",), "k")
CHILD = TableDef("child", ("parent", "name"), "parent", frozenset({"parent"}))


def store(**kw):
    s = new_cluster(ClusterConfig(**kw), SimClock())
    s.create_table(KV)
    s.create_table(CHILD)
    return s


def put(s, table, row):
    tx = s.begin()
    s.read_pk(tx, table, s.table(table).pk_of(row), EXCL)
    s.write(tx, table, row)
    s.commit(tx)


class TestTopology:
    def test_twelve_nodes_two_replicas_six_groups(self):
        assert new_cluster(ClusterConfig(12, 2)).num_node_groups == 6

    def test_minimal_cluster(self):
        assert new_cluster(ClusterConfig(2, 2)).num_node_groups == 1

    @pytest.mark.parametrize("kw", [dict(num_datanodes=4, replication_degree=3),
                                    dict(num_datanodes=0), dict(partitions_per_table=0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            new_cluster(ClusterConfig(**kw))

    def test_duplicate_table(self):
        s = store()
        with pytest.raises(DuplicateTable):
            s.create_table(KV)

    def test_partitions_round_robin_over_groups(self):
        s = store()
        assert [s.group_of_partition(p).group_id for p in range(12)] == list(range(6)) * 2


class TestPartitioning:
    def test_deterministic(self):
        s = store()
        assert s.partition_of("kv", 12345) == s.partition_of("kv", 12345)

    def test_uniform_within_30_percent(self):
        s = store()
        c = Counter(s.partition_of("kv", k) for k in range(10_000))
        assert len(c) == 12
        for n in c.values():
            assert abs(n - 10_000 / 12) <= 0.3 * 10_000 / 12

    def test_single_partition_table(self):
        s = store(partitions_per_table=1)
        assert {s.partition_of("kv", k) for k in range(100)} == {0}

    def test_encoding(self):
        assert encode_key(1) == b"\x00" * 7 + b"\x01"
        assert encode_key((1, "a")) == encode_key(1) + b"a"


class TestBegin:
    def test_hint_colocates_coordinator(self):
        s = store()
        tx = s.begin(("child", 7))
        assert tx.coordinator_group == s.group_of_partition(s.partition_of("child", 7)).group_id

    def test_no_hint(self):
        assert store().begin().coordinator_group in range(6)

    def test_dead_hinted_group(self):
        s = store()
        g = s.group_of_partition(s.partition_of("child", 7))
        for dn in g.member_datanode_ids:
            s.kill_datanode(dn)
        with pytest.raises(Unavailable):
            s.begin(("child", 7))


class TestReads:
    def test_read_committed_ignores_exclusive_holder(self):
        s = store()
        put(s, "kv", {"k": 1, "v": "old"})
        w = s.begin()
        s.read_pk(w, "kv", (1,), EXCL)
        s.write(w, "kv", {"k": 1, "v": "new"})
        r = s.begin()
        assert s.read_pk(r, "kv", (1,), RC)["v"] == "old"
        s.commit(w)
        assert s.read_pk(r, "kv", (1,), RC)["v"] == "new"

    def test_absent_row_counts_in_mode_class(self):
        s = store()
        tx = s.begin()
        assert s.read_pk(tx, "kv", (9,), SHARED) is None
        assert tx.ledger["PK_shared"] == 1 and tx.ledger.total() == 1

    def test_exclusive_conflict_times_out(self):
        s = store()
        a, b = s.begin(), s.begin()
        s.read_pk(a, "kv", (1,), EXCL)
        t0 = s.clock.now()
        with pytest.raises(Timeout):
            s.read_pk(b, "kv", (1,), EXCL)
        assert s.clock.now() - t0 == s.config.lock_wait_timeout
        with pytest.raises(TxInactive):
            s.read_pk(b, "kv", (2,), RC)

    def test_shared_shared_compatible(self):
        s = store()
        a, b = s.begin(), s.begin()
        s.read_pk(a, "kv", (1,), SHARED)
        s.read_pk(b, "kv", (1,), SHARED)
        assert len(s.lock_holders("kv", (1,))) == 2

    def test_shared_then_exclusive_conflicts(self):
        s = store()
        a, b = s.begin(), s.begin()
        s.read_pk(a, "kv", (1,), SHARED)
        with pytest.raises(Timeout):
            s.read_pk(b, "kv", (1,), EXCL)

    def test_no_upgrades(self):
        s = store()
        a = s.begin()
        s.read_pk(a, "kv", (1,), SHARED)
        with pytest.raises(LockUpgrade):
            s.read_pk(a, "kv", (1,), EXCL)
        assert s.held_lock_count() == 0

    def test_wall_clock_waiter_proceeds_after_release(self):
        s = new_cluster(ClusterConfig(), WallClock())
        s.create_table(KV)
        a, b = s.begin(), s.begin()
        s.read_pk(a, "kv", (1,), EXCL)
        got = []

        def waiter():
            s.read_pk(b, "kv", (1,), EXCL)
            got.append(time.monotonic())

        t = threading.Thread(target=waiter)
        t.start()
        time.sleep(0.05)
        assert not got
        s.commit(a)
        t.join(2)
        assert got

    def test_batch_is_one_round_trip(self):
        s = store()
        for i in range(9):
            put(s, "kv", {"k": i, "v": i})
        tx = s.begin()
        out = s.batch_read_pk(tx, [("kv", (i,)) for i in range(9)])
        assert [r["v"] for r in out] == list(range(9))
        assert tx.ledger.as_dict()["Batch"] == 1 and tx.ledger.total() == 1

    def test_batch_of_one_matches_read(self):
        s = store()
        put(s, "kv", {"k": 3, "v": "x"})
        tx = s.begin()
        assert s.batch_read_pk(tx, [("kv", (3,))]) == [s.read_pk(tx, "kv", (3,))]
        assert tx.ledger["Batch"] == 1 and tx.ledger["PK_rc"] == 1

    def test_batch_mismatched_name_slot_is_none(self):
        s = store()
        put(s, "child", {"parent": 1, "name": "a"})
        tx = s.begin()
        assert s.batch_read_pk(tx, [("child", (1, "a")), ("child", (1, "b"))])[1] is None

    def test_empty_batch_rejected(self):
        s = store()
        with pytest.raises(ValueError):
            s.batch_read_pk(s.begin(), [])


class TestScans:
    def test_ppis_lists_children(self):
        s = store()
        for n in "abc":
            put(s, "child", {"parent": 5, "name": n})
        put(s, "child", {"parent": 6, "name": "z"})
        tx = s.begin()
        rows = s.scan_partition(tx, "child", 5)
        assert [r["name"] for r in rows] == ["a", "b", "c"]
        assert tx.ledger["PPIS"] == 1 and tx.ledger.total() == 1

    def test_empty_partition(self):
        s = store()
        tx = s.begin()
        assert s.scan_partition(tx, "child", 99) == [] and tx.ledger["PPIS"] == 1

    def test_projection(self):
        s = store()
        put(s, "child", {"parent": 5, "name": "a", "id": 10, "big": "x" * 100})
        rows = s.scan_partition(s.begin(), "child", 5, projection=("id",))
        assert rows == [{"id": 10}]

    def test_index_scan_empty(self):
        s = store()
        tx = s.begin()
        assert s.scan_index(tx, "kv") == [] and tx.ledger["IS"] == 1

    def test_full_scan_after_inserts(self):
        s = store()
        tx = s.begin()
        for i in range(100):
            s.read_pk(tx, "kv", (i,), EXCL)
            s.write(tx, "kv", {"k": i})
        s.commit(tx)
        tx = s.begin()
        assert len(s.scan_full(tx, "kv")) == 100 and tx.ledger["FTS"] == 1

    def test_index_scan_with_dead_group(self):
        s = store()
        s.kill_datanode(0)
        s.kill_datanode(1)
        with pytest.raises(Unavailable):
            s.scan_index(s.begin(), "kv")


class TestWrites:
    def test_buffered_until_commit(self):
        s = store()
        tx = s.begin()
        s.read_pk(tx, "kv", (1,), EXCL)
        s.write(tx, "kv", {"k": 1, "v": 1})
        assert s.peek("kv", (1,)) is None
        s.commit(tx)
        assert s.peek("kv", (1,)) == {"k": 1, "v": 1}

    def test_write_needs_exclusive(self):
        s = store()
        tx = s.begin()
        with pytest.raises(LockNotHeld):
            s.write(tx, "kv", {"k": 1})
        s.read_pk(tx, "kv", (2,), SHARED)
        with pytest.raises(LockNotHeld):
            s.write(tx, "kv", {"k": 2})

    def test_covered_write(self):
        s = store()
        tx = s.begin()
        s.read_pk(tx, "kv", (1,), EXCL)
        s.write(tx, "child", {"parent": 1, "name": "x"}, covered_by=("kv", (1,)))
        s.commit(tx)
        assert s.peek("child", (1, "x"))

    def test_per_row_flush(self):
        s = store()
        tx = s.begin()
        for i in range(5):
            s.read_pk(tx, "kv", (i,), EXCL)
            s.write(tx, "kv", {"k": i})
        s.commit(tx)
        assert tx.ledger["PK_w"] == 5

    def test_grouped_flush(self):
        s = store(batch_flush_mode=BatchFlushMode.GROUPED)
        tx = s.begin()
        for n in "abcde":
            s.read_pk(tx, "child", (1, n), EXCL)
            s.write(tx, "child", {"parent": 1, "name": n})
        s.commit(tx)
        assert tx.ledger["PK_w"] == 1

    def test_abort_discards(self):
        s = store()
        tx = s.begin()
        s.read_pk(tx, "kv", (1,), EXCL)
        s.write(tx, "kv", {"k": 1})
        s.abort(tx)
        assert s.peek("kv", (1,)) is None and s.held_lock_count() == 0

    def test_empty_commit(self):
        s = store()
        tx = s.begin()
        s.read_pk(tx, "kv", (1,), EXCL)
        s.commit(tx)
        assert tx.ledger["PK_w"] == 0 and s.held_lock_count() == 0

    def test_delete(self):
        s = store()
        put(s, "kv", {"k": 1})
        tx = s.begin()
        s.read_pk(tx, "kv", (1,), EXCL)
        s.write(tx, "kv", {"k": 1}, "delete")
        s.commit(tx)
        assert s.rows("kv") == []

    def test_commit_to_dead_partition_is_atomic(self):
        s = store()
        tx = s.begin()
        keys = list(range(40))
        for k in keys:
            s.read_pk(tx, "kv", (k,), EXCL)
            s.write(tx, "kv", {"k": k})
        g = s.group_of_partition(s.partition_of("kv", 0))
        for dn in g.member_datanode_ids:
            s.kill_datanode(dn)
        with pytest.raises(Unavailable):
            s.commit(tx)
        assert s.rows("kv") == [] and s.held_lock_count() == 0


class TestFailures:
    def test_one_per_group_survives(self):
        s = store()
        for g in s.node_groups:
            s.kill_datanode(g.member_datanode_ids[0])
        tx = s.begin()
        for k in range(50):
            s.read_pk(tx, "kv", (k,), RC)
        assert all(s.partition_available(p) for p in range(12))

    def test_whole_group_dead_then_revived(self):
        s = store()
        g = s.node_groups[2]
        for dn in g.member_datanode_ids:
            s.kill_datanode(dn)
        dead = [p for p in range(12) if s.group_of_partition(p) is g]
        key = next(k for k in range(1000) if s.partition_of("kv", k) in dead)
        with pytest.raises(Unavailable):
            s.read_pk(s.begin(), "kv", (key,))
        s.revive_datanode(g.member_datanode_ids[1])
        assert s.read_pk(s.begin(), "kv", (key,)) is None


def test_ledger_determinism():
    def run():
        s = store()
        tx = s.begin()
        for k in range(20):
            s.read_pk(tx, "kv", (k,), EXCL if k % 2 else SHARED)
        s.batch_read_pk(tx, [("kv", (k,)) for k in range(30, 40)])
        s.scan_partition(tx, "child", 3)
        s.commit(tx)
        return tx.ledger.as_dict(), s.dump_json()
    assert run() == run()


def test_dump_shape():
    s = store()
    put(s, "kv", {"k": 1})
    d = s.dump()
    pid = str(s.partition_of("kv", 1))
    assert d["kv"] == {pid: [{"k": 1}]}
