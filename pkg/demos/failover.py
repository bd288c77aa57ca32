"""Kill a namenode mid-benchmark, then another, then add a fresh one."""
from ndbfs.harness.experiments import failover_experiment

if __name__ == "__main__":
    rep = failover_experiment((800, 1600), ops=3000, num_namenodes=4, restart_at=(2200,))
    print(f"ops {rep.ops}, resubmitted {rep.resubmissions}, unrecovered {rep.unrecovered}")
    print(f"killed {rep.extra['killed']}, alive at the end {rep.extra['alive']}")
    for point in rep.timeline:
        if "event" in point:
            print(f"  op {point['op']:>5}: {point['event']}")
    print("legitimate namespace errors:", rep.error_counts)
