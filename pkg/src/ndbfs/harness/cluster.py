"""A store, its schema and a set of namenodes, with failure injection."""
from __future__ import annotations

import threading
from typing import Optional

from .. import schema as S
from ..errors import NamenodeDown
from ..ndbsim import SimClock, StoreCluster, WallClock, new_cluster
from ..nncore import Namenode
from .config import HarnessConfig


class FileSystemCluster:
    """Store plus ``num_namenodes`` stateless namenodes.

    Heartbeats are pumped on demand: before any liveness decision every live
    namenode whose beat is due writes it, which stands in for a perfectly
    punctual periodic task.  ``start_heartbeats`` adds real periodic threads
    for wall-clock runs.
    """

    def __init__(self, cfg: Optional[HarnessConfig] = None, num_namenodes: Optional[int] = None,
                 clock=None):
        self.cfg = cfg or HarnessConfig()
        if clock is None:
            clock = SimClock() if self.cfg.deterministic else WallClock(self.cfg.bench.wall_scale)
        self.clock = clock
        self.store: StoreCluster = new_cluster(self.cfg.cluster, clock)
        self.schema = S.define_schema(self.store, self.cfg.policy)
        self.namenodes: list = []
        self._pump_lock = threading.Lock()
        self._beat_threads: list = []
        self._stop = threading.Event()
        for _ in range(num_namenodes if num_namenodes is not None else self.cfg.bench.num_namenodes):
            self.add_namenode()

    @property
    def policy(self) -> S.PartitionPolicy:
        return self.cfg.policy

    # ---- namenodes

    def add_namenode(self) -> Namenode:
        nn = Namenode(self.store, self.cfg.policy, self.cfg.namenode, self.clock)
        nn.subtree_config = self.cfg.subtree
        nn.membership_hook = self.pump_heartbeats
        self.namenodes.append(nn)
        return nn

    def alive(self) -> list:
        return [nn for nn in self.namenodes if nn.alive]

    def namenode(self, nn_id: int) -> Namenode:
        for nn in self.namenodes:
            if nn.id == nn_id:
                return nn
        raise KeyError(nn_id)

    def kill_namenode(self, nn: Namenode) -> None:
        nn.kill()

    def restart_namenode(self, nn: Namenode) -> Namenode:
        """A restarted process registers under a fresh id."""
        nn.kill()
        return self.add_namenode()

    def pump_heartbeats(self) -> None:
        if not self._pump_lock.acquire(blocking=False):
            return
        try:
            now = self.clock.now()
            for nn in self.alive():
                if now - nn.last_beat_at >= nn.config.beat_ms:
                    try:
                        nn.heartbeat()
                    except NamenodeDown:
                        pass
        finally:
            self._pump_lock.release()

    def tick(self, ms: float) -> None:
        """Advance simulated time and let every live namenode beat."""
        self.clock.advance(ms)
        for nn in self.alive():
            nn.heartbeat()

    def alive_ids(self) -> list:
        nn = next(iter(self.alive()), None)
        if nn is None:
            return []
        return nn.alive_namenodes()

    def leader(self) -> Optional[int]:
        ids = self.alive_ids()
        return ids[0] if ids else None

    def start_heartbeats(self) -> None:
        if self.clock.simulated or self._beat_threads:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(self.clock.real_seconds(self.cfg.namenode.beat_ms)):
                self.pump_heartbeats()

        t = threading.Thread(target=loop, name="heartbeats", daemon=True)
        t.start()
        self._beat_threads.append(t)

    def stop_heartbeats(self) -> None:
        self._stop.set()
        for t in self._beat_threads:
            t.join()
        self._beat_threads.clear()

    # ---- store failures

    def kill_datanode(self, dn: int) -> None:
        self.store.kill_datanode(dn)

    def revive_datanode(self, dn: int) -> None:
        self.store.revive_datanode(dn)

    def close(self) -> None:
        self.stop_heartbeats()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
