"""``ndbfs`` command line: experiments, benchmark, fsck and cost tables.

Exit status is 0 on success, 1 when an invariant check fails (fsck violations,
budget mismatches, unrecovered client operations) and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from typing import Optional, Sequence

from .. import fsops as F
from ..fsops import OpKind
from . import experiments as X
from .bench import run_benchmark
from .cluster import FileSystemCluster
from .config import ConfigError, HarnessConfig, load
from .fsck import fsck
from .metrics import REPORT_SCHEMA_VERSION, capacity_table, estimate_footprint
from .workload import generate_namespace

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="write the report here")
    common.add_argument("--csv", action="store_true", help="write CSV rows instead of JSON")
    common.add_argument("--deterministic", action="store_true",
                        help="single worker on a simulated clock")
    common.add_argument("--seed", type=int)

    p = _Parser(prog="ndbfs", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", parents=[common], help="run the workload mix")
    b.add_argument("--ops", type=int)
    b.add_argument("--inodes", type=int)
    b.add_argument("--namenodes", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--policy", choices=("random", "round_robin", "sticky"))

    d = sub.add_parser("depth", parents=[common], help="warm/cold ledgers against depth")
    d.add_argument("--op", choices=("CreateFile", "GetBlockLocations"), default="CreateFile")
    d.add_argument("--depths", default="4,6,8,10,12")

    h = sub.add_parser("hotspot", parents=[common], help="partition load under a shared directory")
    h.add_argument("--depth", type=int, default=3, help="depth of the shared directory (0: uniform)")
    h.add_argument("--files", type=int, default=600)
    h.add_argument("--ops", type=int, default=3000)

    f = sub.add_parser("failover", parents=[common], help="kill namenodes during a benchmark")
    f.add_argument("--ops", type=int, default=3000)
    f.add_argument("--kill-at", default="1000", help="comma separated operation indices")
    f.add_argument("--restart-at", default="")
    f.add_argument("--namenodes", type=int, default=4)
    f.add_argument("--workers", type=int)
    f.add_argument("--policy", choices=("random", "round_robin", "sticky"), default="random")
    f.add_argument("--inodes", type=int, default=2000)

    k = sub.add_parser("fsck", parents=[common], help="generate a namespace and check it")
    k.add_argument("--inodes", type=int)

    fp = sub.add_parser("footprint", parents=[common], help="metadata memory per file")
    fp.add_argument("--files", type=float, action="append")
    fp.add_argument("--name-length", type=int, default=10)

    sub.add_parser("counts", parents=[common], help="print the round-trip budget table")
    return p


def _ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma separated integers, got {text!r}") from None


def _config(args) -> HarnessConfig:
    cfg = load(args.config) if args.config else HarnessConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.deterministic:
        cfg = dataclasses.replace(cfg, deterministic=True)
    return cfg


def _emit(args, report: dict, rows: Optional[list] = None) -> None:
    if args.csv:
        buf = io.StringIO()
        rows = rows or [report]
        keys = sorted({k for r in rows for k in r})
        w = csv.DictWriter(buf, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (dict, list)) else v
                        for k, v in r.items()})
        text = buf.getvalue()
    else:
        text = json.dumps(report, indent=2, sort_keys=True, default=str) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_bench(args, cfg: HarnessConfig) -> int:
    b = cfg.bench
    workers = 1 if cfg.deterministic else (args.workers or b.workers)
    with FileSystemCluster(cfg, args.namenodes or b.num_namenodes) as cl:
        ns = dataclasses.replace(cfg.namespace, target_inodes=args.inodes or cfg.namespace.target_inodes)
        st = generate_namespace(cl.store, ns, cl.policy)
        cl.start_heartbeats()
        rep = run_benchmark(cl, st.file_paths, st.dir_paths, mix=cfg.mix,
                            ops=b.ops if args.ops is None else args.ops, workers=workers,
                            num_clients=b.num_clients, policy=args.policy or b.client_policy,
                            seed=cfg.seed)
        cl.stop_heartbeats()
        check = fsck(cl.store, cl.policy)
    rep.extra["fsck_violations"] = check.violations
    rep.extra["namespace"] = st.to_dict()
    _emit(args, rep.to_dict(cfg.deterministic), rep.csv_rows())
    return EXIT_OK if check.ok and rep.unrecovered == 0 else EXIT_VIOLATION


def _cmd_depth(args, cfg: HarnessConfig) -> int:
    rows = X.depth_experiment(OpKind(args.op), _ints(args.depths), cfg)
    ok = all(r["fsck_ok"] for r in rows)
    if args.op == "CreateFile":
        ok = ok and all(r["warm_total"] == F.budget_total(OpKind.CREATE_FILE, r["depth"], True)
                        and r["cold_total"] == F.budget_total(OpKind.CREATE_FILE, r["depth"], False)
                        for r in rows if r["depth"] >= 2)
    _emit(args, {"schema_version": REPORT_SCHEMA_VERSION, "rows": rows}, rows)
    return EXIT_OK if ok else EXIT_VIOLATION


def _cmd_hotspot(args, cfg: HarnessConfig) -> int:
    rep = X.hotspot_experiment(args.depth, args.files, args.ops, cfg, seed=cfg.seed)
    _emit(args, rep.to_dict(True), rep.csv_rows())
    return EXIT_OK if rep.extra["fsck_ok"] else EXIT_VIOLATION


def _cmd_failover(args, cfg: HarnessConfig) -> int:
    workers = 1 if cfg.deterministic else (args.workers or cfg.bench.workers)
    rep = X.failover_experiment(_ints(args.kill_at), args.ops, cfg,
                                num_namenodes=args.namenodes, workers=workers,
                                policy=args.policy, restart_at=_ints(args.restart_at),
                                seed=cfg.seed, inodes=args.inodes)
    _emit(args, rep.to_dict(cfg.deterministic), rep.csv_rows())
    return EXIT_OK if rep.extra["fsck_ok"] and rep.unrecovered == 0 else EXIT_VIOLATION


def _cmd_fsck(args, cfg: HarnessConfig) -> int:
    cl = FileSystemCluster(dataclasses.replace(cfg, deterministic=True), 1)
    ns = dataclasses.replace(cfg.namespace, target_inodes=args.inodes or cfg.namespace.target_inodes)
    st = generate_namespace(cl.store, ns, cl.policy)
    rep = fsck(cl.store, cl.policy)
    out = {"schema_version": REPORT_SCHEMA_VERSION, "ok": rep.ok,
           "violations": rep.violations,
           "counts": {"inodes": rep.inodes, "files": rep.files, "dirs": rep.dirs}, "namespace": st.to_dict()}
    _emit(args, out, [{"violation": v} for v in rep.violations] or [{"violation": ""}])
    return EXIT_OK if rep.ok else EXIT_VIOLATION


def _cmd_footprint(args, cfg: HarnessConfig) -> int:
    if args.files:
        rows = []
        for n in args.files:
            hops, hdfs = estimate_footprint(n, args.name_length)
            rows.append({"files": n, "hopsfs_bytes": hops, "hdfs_bytes": hdfs})
    else:
        rows = capacity_table(name_len=args.name_length)
    _emit(args, {"schema_version": REPORT_SCHEMA_VERSION, "rows": rows}, rows)
    return EXIT_OK


def _cmd_counts(args, cfg: HarnessConfig) -> int:
    """Budgets checked against measured ledgers at depth 10."""
    rows = []
    ok = True
    for kind in F.BUDGETED_KINDS:
        for warm in (True, False):
            b = F.budget(kind, 10, warm)
            rows.append({"op": kind.value, "depth": 10, "cache": "warm" if warm else "cold",
                         **b, "total": sum(b.values())})
    for r in X.depth_experiment(OpKind.CREATE_FILE, (10,), cfg):
        ok = ok and r["warm"] == _full(F.budget(OpKind.CREATE_FILE, 10, True))
        ok = ok and r["cold"] == _full(F.budget(OpKind.CREATE_FILE, 10, False))
    for r in X.depth_experiment(OpKind.GET_BLOCK_LOCATIONS, (10,), cfg):
        ok = ok and r["warm"] == _full(F.budget(OpKind.GET_BLOCK_LOCATIONS, 10, True))
        ok = ok and r["cold"] == _full(F.budget(OpKind.GET_BLOCK_LOCATIONS, 10, False))
    _emit(args, {"schema_version": REPORT_SCHEMA_VERSION, "budgets_match": ok, "rows": rows}, rows)
    return EXIT_OK if ok else EXIT_VIOLATION


def _full(b: dict) -> dict:
    from ..ndbsim import RoundTripLedger
    led = RoundTripLedger()
    for k, v in b.items():
        led.add(k, v)
    return led.as_dict()


COMMANDS = {"bench": _cmd_bench, "depth": _cmd_depth, "hotspot": _cmd_hotspot,
            "failover": _cmd_failover, "fsck": _cmd_fsck, "footprint": _cmd_footprint,
            "counts": _cmd_counts}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        cfg = _config(args)
        return COMMANDS[args.cmd](args, cfg)
    except ConfigError as e:
        print(f"ndbfs: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
