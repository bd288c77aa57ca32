"""Where does read load land when every client hammers one directory?"""
from ndbfs.harness.experiments import hotspot_experiment

if __name__ == "__main__":
    for depth, label in ((0, "whole namespace"), (1, "shared dir at depth 1"),
                         (3, "shared dir at depth 3")):
        x = hotspot_experiment(depth, files=400, ops=2000).extra
        print(f"{label:<22} busiest partition share {x['max_partition_share']:.3f}, "
              f"max/mean {x['max_mean_ratio']:.2f}")
