"""JSON configuration document for the harness and CLI.

Top-level keys (all optional)::

    {
      "seed": 0,
      "deterministic": false,
      "cluster":   {"num_datanodes": 12, "replication_degree": 2, "partitions_per_table": 12,
                    "lock_wait_timeout": 1200, "batch_flush_mode": "PerRow", "hash_seed": 0},
      "policy":    {"random_partition_depth": 2},
      "namenode":  {"cache_capacity": 100000, "beat_ms": 500, "missed_beats": 3,
                    "retry_base_ms": 50, "retry_factor": 2, "max_attempts": 8},
      "subtree":   {"delete_batch_size": 1000, "quiesce_parallelism": 4,
                    "backoff_base_ms": 100, "backoff_factor": 2, "max_attempts": 10},
      "mix":       {"probabilities": {...}, "dir_ratios": {...}},
      "namespace": {"target_inodes": 2000, "files_per_dir": 16, "subdirs_per_dir": 2,
                    "mean_depth": 7, "name_length": 34, "blocks_per_file": 1,
                    "replication": 3, "seed": 0},
      "cost":      {"pk": 1, "batch": 1, "ppis": 1, "is_factor": 1, "fts_factor": 2},
      "bench":     {"num_namenodes": 4, "num_clients": 8, "client_policy": "random",
                    "ops": 2000, "workers": 4, "wall_scale": 1.0}
    }
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..ndbsim import BatchFlushMode, ClusterConfig
from ..nncore import NamenodeConfig
from ..schema import PartitionPolicy
from ..subtree import SubtreeConfig
from .metrics import CostModel
from .workload import NamespaceGenConfig, WorkloadMix


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    num_namenodes: int = 4
    num_clients: int = 8
    client_policy: str = "random"
    ops: int = 2000
    workers: int = 4
    wall_scale: float = 1.0

    def __post_init__(self):
        if self.client_policy not in ("random", "round_robin", "sticky"):
            raise ConfigError(f"unknown client policy {self.client_policy!r}")
        if self.num_namenodes < 1 or self.num_clients < 1 or self.workers < 1 or self.ops < 0:
            raise ConfigError("bench counts must be positive")


@dataclass
class HarnessConfig:
    seed: int = 0
    deterministic: bool = False
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    policy: PartitionPolicy = field(default_factory=PartitionPolicy)
    namenode: NamenodeConfig = field(default_factory=NamenodeConfig)
    subtree: SubtreeConfig = field(default_factory=SubtreeConfig)
    mix: WorkloadMix = field(default_factory=WorkloadMix)
    namespace: NamespaceGenConfig = field(default_factory=NamespaceGenConfig)
    cost: CostModel = field(default_factory=CostModel)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def with_seed(self, seed: int) -> "HarnessConfig":
        return dataclasses.replace(
            self, seed=seed, cluster=dataclasses.replace(self.cluster, seed=seed),
            namespace=dataclasses.replace(self.namespace, seed=seed))

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "deterministic": self.deterministic}
        for name in ("cluster", "policy", "namenode", "subtree", "namespace", "cost", "bench"):
            d[name] = dataclasses.asdict(getattr(self, name))
        d["cluster"]["batch_flush_mode"] = self.cluster.batch_flush_mode.value
        d["mix"] = self.mix.to_dict()
        return d


def _build(cls, data: dict, section: str, **extra):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**{**data, **extra})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r}: {e}") from e


def from_dict(data: dict) -> HarnessConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    known = {f.name for f in dataclasses.fields(HarnessConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    seed = int(data.get("seed", 0))
    cl = dict(data.get("cluster", {}))
    if "batch_flush_mode" in cl:
        try:
            cl["batch_flush_mode"] = BatchFlushMode(cl["batch_flush_mode"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
    cl.setdefault("seed", seed)
    cluster = _build(ClusterConfig, cl, "cluster")
    try:
        cluster.validate()
    except Exception as e:
        raise ConfigError(str(e)) from e
    pol = dict(data.get("policy", {}))
    pol.setdefault("hash_seed", cluster.hash_seed)
    ns = dict(data.get("namespace", {}))
    ns.setdefault("seed", seed)
    cost = dict(data.get("cost", {}))
    cost.setdefault("num_partitions", cluster.partitions_per_table)
    try:
        mix = WorkloadMix(**data["mix"]) if "mix" in data else WorkloadMix()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid 'mix': {e}") from e
    return HarnessConfig(
        seed=seed,
        deterministic=bool(data.get("deterministic", False)),
        cluster=cluster,
        policy=_build(PartitionPolicy, pol, "policy"),
        namenode=_build(NamenodeConfig, data.get("namenode", {}), "namenode"),
        subtree=_build(SubtreeConfig, data.get("subtree", {}), "subtree"),
        mix=mix,
        namespace=_build(NamespaceGenConfig, ns, "namespace"),
        cost=_build(CostModel, cost, "cost"),
        bench=_build(BenchConfig, data.get("bench", {}), "bench"),
    )


def load(path: str) -> HarnessConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    return from_dict(data)
