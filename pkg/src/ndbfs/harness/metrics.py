"""Cost model, metadata footprint arithmetic and benchmark reports."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..ndbsim import OP_CLASSES, RoundTripLedger

REPORT_SCHEMA_VERSION = 1
GIB = 2 ** 30


@dataclass(frozen=True)
class CostModel:
    """Latency units per ledger class; scans touching every partition cost more."""
    pk: float = 1.0
    batch: float = 1.0
    ppis: float = 1.0
    num_partitions: int = 12
    is_factor: float = 1.0
    fts_factor: float = 2.0

    def class_latency(self, op_class: str) -> float:
        if op_class.startswith("PK_"):
            return self.pk
        if op_class == "Batch":
            return self.batch
        if op_class == "PPIS":
            return self.ppis
        if op_class == "IS":
            return self.is_factor * self.num_partitions
        if op_class == "FTS":
            return self.fts_factor * self.num_partitions
        raise KeyError(op_class)

    def latency(self, ledger) -> float:
        counts = ledger.as_dict() if isinstance(ledger, RoundTripLedger) else dict(ledger)
        return sum(n * self.class_latency(c) for c, n in counts.items())

    def throughput(self, ledger) -> float:
        """Operations per latency unit for a single sequential client."""
        lat = self.latency(ledger)
        return 1.0 / lat if lat else math.inf


@dataclass(frozen=True)
class FootprintModel:
    hopsfs_bytes_per_file: int = 1552
    hdfs_fixed_bytes: int = 448

    def hdfs_bytes_per_file(self, name_len: int) -> int:
        return self.hdfs_fixed_bytes + name_len

    def files_per_gib(self, system: str, name_len: int = 10) -> float:
        per = self.hopsfs_bytes_per_file if system == "hopsfs" else self.hdfs_bytes_per_file(name_len)
        return GIB / per


def estimate_footprint(n_files: float, name_len: int = 10,
                       model: FootprintModel = FootprintModel()) -> tuple:
    """Bytes of metadata for ``n_files`` two-block, three-replica files: (hopsfs, hdfs)."""
    return (n_files * model.hopsfs_bytes_per_file, n_files * model.hdfs_bytes_per_file(name_len))


def capacity_table(sizes_gib=(1, 50, 100, 200, 500, 1024, 24 * 1024), name_len: int = 10,
                   model: FootprintModel = FootprintModel()) -> list:
    return [{"memory_gib": g,
             "hdfs_files": g * model.files_per_gib("hdfs", name_len),
             "hopsfs_files": g * model.files_per_gib("hopsfs", name_len)} for g in sizes_gib]


def percentile(values: list, q: float) -> float:
    if not values:
        return 0.0
    s = sorted(values)
    k = max(0, min(len(s) - 1, math.ceil(q / 100.0 * len(s)) - 1))
    return s[k]


@dataclass
class OpStats:
    count: int = 0
    ok: int = 0
    errors: dict = field(default_factory=dict)
    latencies: list = field(default_factory=list, repr=False)
    ledger: dict = field(default_factory=lambda: {c: 0 for c in OP_CLASSES})

    def to_dict(self) -> dict:
        return {"count": self.count, "ok": self.ok, "errors": dict(sorted(self.errors.items())),
                "mean_latency": (sum(self.latencies) / len(self.latencies)) if self.latencies else 0.0,
                "p99_latency": percentile(self.latencies, 99),
                "ledger": dict(self.ledger)}


@dataclass
class MetricsReport:
    ops: int = 0
    wall_seconds: float = 0.0
    per_kind: dict = field(default_factory=dict)
    realized_mix: dict = field(default_factory=dict)
    error_counts: dict = field(default_factory=dict)
    unrecovered: int = 0
    resubmissions: int = 0
    partition_load: dict = field(default_factory=dict)
    timeline: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def ops_per_sec(self) -> float:
        return self.ops / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def record(self, kind: str, ledger: Optional[RoundTripLedger], cost: CostModel,
               error: Optional[str] = None) -> None:
        st = self.per_kind.setdefault(kind, OpStats())
        st.count += 1
        self.ops += 1
        if error is None:
            st.ok += 1
        else:
            st.errors[error] = st.errors.get(error, 0) + 1
            self.error_counts[error] = self.error_counts.get(error, 0) + 1
        if ledger is not None:
            st.latencies.append(cost.latency(ledger))
            for c, n in ledger.as_dict().items():
                st.ledger[c] = st.ledger.get(c, 0) + n

    def finish(self) -> "MetricsReport":
        self.realized_mix = {k: v.count / self.ops for k, v in sorted(self.per_kind.items())} \
            if self.ops else {}
        return self

    def partition_skew(self, num_partitions: Optional[int] = None) -> float:
        """Max over mean load; idle partitions count when ``num_partitions`` is given."""
        loads = list(self.partition_load.values())
        if not loads or sum(loads) == 0:
            return 0.0
        mean = sum(loads) / (num_partitions or len(loads))
        return max(loads) / mean

    def to_dict(self, deterministic: bool = False) -> dict:
        d = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "ops": self.ops,
            "per_kind": {k: v.to_dict() for k, v in sorted(self.per_kind.items())},
            "realized_mix": dict(self.realized_mix),
            "error_counts": dict(sorted(self.error_counts.items())),
            "unrecovered": self.unrecovered,
            "resubmissions": self.resubmissions,
            "partition_load": {str(k): v for k, v in sorted(self.partition_load.items())},
            "partition_skew": self.partition_skew(),
            "timeline": list(self.timeline),
            "extra": dict(self.extra),
        }
        if not deterministic:
            d["wall_seconds"] = self.wall_seconds
            d["ops_per_sec"] = self.ops_per_sec
        return d

    def csv_rows(self) -> list:
        rows = [["kind", "count", "ok", "mean_latency", "p99_latency"] + list(OP_CLASSES)]
        for k, v in sorted(self.per_kind.items()):
            d = v.to_dict()
            rows.append([k, d["count"], d["ok"], d["mean_latency"], d["p99_latency"]]
                        + [d["ledger"].get(c, 0) for c in OP_CLASSES])
        return rows


def config_dict(obj) -> dict:
    return asdict(obj)
