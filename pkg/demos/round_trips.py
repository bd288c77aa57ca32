"""Cold versus warm hint cache: store round trips per operation as paths get deeper."""
from ndbfs.fsops import OpKind
from ndbfs.harness.experiments import depth_experiment


def show(op: OpKind) -> None:
    print(f"\n{op.value}")
    print(f"{'depth':>5} {'cold':>5} {'warm':>5} {'saved':>7}  cold ledger")
    for r in depth_experiment(op, (4, 6, 8, 10, 12)):
        cold = {k: v for k, v in r["cold"].items() if v}
        print(f"{r['depth']:>5} {r['cold_total']:>5} {r['warm_total']:>5} {r['savings']:>7.1%}  {cold}")


if __name__ == "__main__":
    show(OpKind.CREATE_FILE)
    show(OpKind.GET_BLOCK_LOCATIONS)
