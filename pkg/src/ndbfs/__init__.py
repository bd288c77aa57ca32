"""Stateless file-system metadata service over a simulated sharded transactional store."""
from . import errors, fsops, ndbsim, nncore, schema, subtree
from .ndbsim import ClusterConfig, SimClock, WallClock, new_cluster
from .nncore import Namenode, NamenodeConfig, User
from .schema import PartitionPolicy, define_schema

__version__ = "0.1.0"

__all__ = ["errors", "fsops", "ndbsim", "nncore", "schema", "subtree", "ClusterConfig",
           "SimClock", "WallClock", "new_cluster", "Namenode", "NamenodeConfig", "User",
           "PartitionPolicy", "define_schema"]
