"""Exact k-NN and ρ-NN search over divisive cluster trees."""

__version__ = "0.1.0"

from .augment import AugmentSpec, augment
from .dataset import Dataset, GroundTruth, load, save
from .metrics import METRICS, Metric, get_metric
from .search import (
    SearchReport,
    knn,
    knn_breadth_first_sieve,
    knn_depth_first_sieve,
    knn_repeated_rnn,
    linear_knn,
    linear_rnn,
    rho_nn,
)
from .tree import PartitionCriteria, Tree, build, depth_first_reorder, load_tree, save_tree
from .tuning import TuningResult, auto_tune

__all__ = [
    "AugmentSpec",
    "Dataset",
    "GroundTruth",
    "METRICS",
    "Metric",
    "PartitionCriteria",
    "SearchReport",
    "Tree",
    "TreeNeighbors",
    "TuningResult",
    "augment",
    "auto_tune",
    "build",
    "depth_first_reorder",
    "get_metric",
    "knn",
    "knn_breadth_first_sieve",
    "knn_depth_first_sieve",
    "knn_repeated_rnn",
    "linear_knn",
    "linear_rnn",
    "load",
    "load_tree",
    "rho_nn",
    "save",
    "save_tree",
]


def __getattr__(name):
    # scikit-learn is slow to import; only load it when the estimator is used
    if name == "TreeNeighbors":
        from .estimator import TreeNeighbors

        return TreeNeighbors
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
