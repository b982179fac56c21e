"""scikit-learn style front end."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .dataset import Dataset
from .metrics import get_metric
from .search import KNN_ALGORITHMS, knn, rho_nn
from .tree import PartitionCriteria, build, depth_first_reorder
from .tuning import auto_tune

__all__ = ["TreeNeighbors"]


class TreeNeighbors(BaseEstimator):
    """Exact nearest neighbors over a divisive cluster tree.

    Parameters
    ----------
    n_neighbors : int
        Default ``k`` for :meth:`kneighbors`.
    radius : float
        Default radius for :meth:`radius_neighbors`.
    distance : str
        One of ``euclidean``, ``cosine``, ``hamming``, ``levenshtein``,
        ``dtw``. The last three take lists of strings or 1-D series.
    algorithm : str
        ``depth-sieve``, ``breadth-sieve``, ``repeated-rnn``, ``linear`` or
        ``auto`` (time the tree algorithms once at fit time and keep the
        fastest).
    strategy : str
        ``unbalanced`` (nearest-pole splits) or ``balanced`` (median splits).
    min_cardinality, max_depth, min_radius
        Partition criteria.
    permute : bool
        Reorder the data depth-first after building.
    seed : int
        Seed for the center sampling during the build.
    """

    def __init__(
        self,
        n_neighbors=10,
        radius=1.0,
        distance="euclidean",
        algorithm="auto",
        strategy="unbalanced",
        min_cardinality=1,
        max_depth=None,
        min_radius=0.0,
        permute=True,
        seed=0,
    ):
        self.n_neighbors = n_neighbors
        self.radius = radius
        self.distance = distance
        self.algorithm = algorithm
        self.strategy = strategy
        self.min_cardinality = min_cardinality
        self.max_depth = max_depth
        self.min_radius = min_radius
        self.permute = permute
        self.seed = seed

    def _as_dataset(self, X):
        metric = get_metric(self.distance)
        if metric.kind == "vector":
            return Dataset(check_array(X, dtype=[np.float64, np.float32]))
        if isinstance(X, Dataset):
            return X
        items = list(X)
        if not items:
            raise ValueError("zero cardinality")
        if metric.kind == "series":
            return Dataset.from_series(items)
        return Dataset.from_sequences(items)

    def _queries(self, X):
        metric = get_metric(self.distance)
        if metric.kind == "vector":
            X = check_array(X, dtype=[np.float64, np.float32])
            if X.shape[1] != self.n_features_in_:
                raise ValueError(
                    f"X has {X.shape[1]} features, but {type(self).__name__} "
                    f"was fitted with {self.n_features_in_}"
                )
            return list(X)
        return list(X)

    def fit(self, X, y=None):
        if self.algorithm != "auto" and self.algorithm not in KNN_ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        data = self._as_dataset(X)
        criteria = PartitionCriteria(self.min_cardinality, self.min_radius, self.max_depth)
        tree = build(data, self.distance, criteria, self.strategy, self.seed)
        if self.permute:
            depth_first_reorder(tree)
        self.tree_ = tree
        self.n_samples_fit_ = len(data)
        if not data.is_ragged:
            self.n_features_in_ = data.points.shape[1]
        if self.algorithm == "auto":
            self.tuning_ = auto_tune(tree, self.n_neighbors)
            self.algorithm_ = self.tuning_.chosen
        else:
            self.algorithm_ = self.algorithm
        return self

    def kneighbors(self, X=None, n_neighbors=None, return_distance=True):
        """Distances and original indices of the nearest fitted points.

        With ``X=None`` every fitted point is queried and not counted as its
        own neighbor.
        """
        check_is_fitted(self, "tree_")
        k = self.n_neighbors if n_neighbors is None else n_neighbors
        tree = self.tree_
        if X is None:
            if k + 1 > self.n_samples_fit_:
                raise ValueError(f"n_neighbors must be < {self.n_samples_fit_} when X is None")
            order = np.argsort(tree.dataset.permutation)
            rows = []
            for i, pos in enumerate(order):
                got = knn(tree, tree.dataset.point(int(pos)), k + 1, self.algorithm_).neighbors
                mine = [nb for nb in got if nb[0] != i]
                rows.append(mine[:k])
        else:
            rows = [knn(tree, q, k, self.algorithm_).neighbors for q in self._queries(X)]
        ind = np.array([[i for i, _ in r] for r in rows], dtype=np.int64).reshape(len(rows), k)
        if not return_distance:
            return ind
        dist = np.array([[d for _, d in r] for r in rows], dtype=np.float64).reshape(len(rows), k)
        return dist, ind

    def radius_neighbors(self, X, radius=None, return_distance=True, sort_results=True):
        """Per query, every fitted point within ``radius``.

        Returns object arrays like scikit-learn. Results are always sorted
        by distance, so ``sort_results`` only exists for compatibility.
        """
        check_is_fitted(self, "tree_")
        rho = self.radius if radius is None else radius
        rows = [rho_nn(self.tree_, q, rho).neighbors for q in self._queries(X)]
        ind = np.empty(len(rows), dtype=object)
        dist = np.empty(len(rows), dtype=object)
        for j, r in enumerate(rows):
            ind[j] = np.array([i for i, _ in r], dtype=np.int64)
            dist[j] = np.array([d for _, d in r], dtype=np.float64)
        if return_distance:
            return dist, ind
        return ind
