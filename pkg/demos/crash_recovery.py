"""A namenode dies halfway through a recursive delete; another one finishes the job."""
from ndbfs.harness.experiments import crash_delete_experiment

if __name__ == "__main__":
    for k in (0, 2, 4):
        r = crash_delete_experiment(5000, crash_after=k)
        print(f"crash after {k} batches: {r['inodes_after_crash']} inodes left, "
              f"fsck violations {len(r['fsck_after_crash'])}; after re-issue "
              f"{r['remaining_inodes']} inodes, violations {len(r['fsck_final'])}")
