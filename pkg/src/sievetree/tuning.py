"""Pick the fastest k-NN algorithm for a particular tree."""

import json
import time
from dataclasses import dataclass

from .search import TREE_ALGORITHMS, knn

__all__ = ["TuningResult", "auto_tune", "tuning_panel"]


@dataclass
class TuningResult:
    chosen: str
    times: dict  # algorithm -> total seconds over the panel
    panel: list  # original indices of the panel queries
    k_used: int

    def to_json(self):
        return json.dumps({
            "chosen": self.chosen,
            "times_us": {a: int(round(t * 1e6)) for a, t in self.times.items()},
            "panel_size": len(self.panel),
            "k": self.k_used,
        })


def tuning_panel(tree, depth=10):
    """Stored positions of the centers of every cluster at the panel depth.

    The depth is capped at the depth of the tree, so shallow trees still
    yield a panel.
    """
    if depth < 0:
        raise ValueError("depth must be non-negative")
    target = min(depth, tree.max_depth)
    return [c.center for c in tree.clusters() if c.depth == target]


def auto_tune(tree, k, depth=10, backend="compiled"):
    """Time every tree algorithm over the panel and return the fastest.

    ``k`` is clipped to the cardinality. One untimed warmup query per
    algorithm runs first, so compilation and cold caches do not count.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    k = min(k, tree.cardinality)
    positions = tuning_panel(tree, depth)
    queries = [tree.dataset.point(p) for p in positions]
    times = {}
    for name in TREE_ALGORITHMS:
        knn(tree, queries[0], k, name, backend=backend)
        t0 = time.perf_counter()
        for q in queries:
            knn(tree, q, k, name, backend=backend)
        times[name] = time.perf_counter() - t0
    chosen = min(times, key=times.get)
    panel = [tree.original(p) for p in positions]
    return TuningResult(chosen, times, panel, k)
