"""Exact ρ-NN and k-NN search over a cluster tree.

Every search counts the distance evaluations it performs; within one
query a point's distance is computed at most once through the scalar path
(centers and poles are memoized).

Neighbors are reported as ``(original index, distance)`` sorted by
distance, ties broken by the smaller original index.

Each algorithm has two backends. ``"python"`` is the plain implementation
in this module; ``"compiled"`` (the default) runs the same traversal in
:mod:`sievetree.engine`. Both give the same neighbors and distance counts.
"""

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .metrics import get_metric, inside, keep_far_child, lower_bound, upper_bound
from .tree import Tree

__all__ = [
    "DeltaTriple",
    "Hits",
    "CandidateEntry",
    "SearchReport",
    "deltas",
    "prune_to_children",
    "rnn_tree_search",
    "rnn_leaf_search",
    "rho_nn",
    "knn_repeated_rnn",
    "quickselect_tau",
    "knn_breadth_first_sieve",
    "knn_depth_first_sieve",
    "linear_knn",
    "linear_rnn",
    "KNN_ALGORITHMS",
    "TREE_ALGORITHMS",
    "knn",
    "BACKENDS",
]

BACKENDS = ("compiled", "python")


@dataclass(frozen=True)
class DeltaTriple:
    """Distance to the center and the bounds it implies for any member."""

    delta: float
    delta_plus: float
    delta_minus: float

    @classmethod
    def of(cls, delta, radius):
        return cls(delta, delta + radius, max(0.0, delta - radius))


@dataclass
class CandidateEntry:
    item: object
    delta_plus: float
    multiplicity: int


@dataclass
class SearchReport:
    neighbors: list
    distance_count: int
    elapsed: float
    algorithm: str = ""
    radii: list = field(default_factory=list)

    @property
    def indices(self):
        return [i for i, _ in self.neighbors]

    @property
    def distances(self):
        return [d for _, d in self.neighbors]

    def to_json(self, query, key="k", value=None):
        return {
            "query": query,
            "algo": self.algorithm,
            key: value,
            "neighbors": [[int(i), float(d)] for i, d in self.neighbors],
            "distance_count": self.distance_count,
            "elapsed_us": int(round(self.elapsed * 1e6)),
        }


class Hits:
    """The ``capacity`` best ``(distance, original index)`` pairs seen so far.

    Backed by a max-heap, so the worst hit is evicted in O(log k).
    """

    __slots__ = ("capacity", "_heap")

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._heap = []

    def __len__(self):
        return len(self._heap)

    @property
    def full(self):
        return len(self._heap) >= self.capacity

    @property
    def worst(self):
        """Largest distance held; only meaningful when non-empty."""
        return -self._heap[0][0]

    def push(self, original, distance):
        entry = (-distance, -original)
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, entry)
        elif entry > self._heap[0]:
            heapq.heapreplace(self._heap, entry)

    def items(self):
        """Hits as ``(original, distance)``, best first."""
        return [(-o, -d) for d, o in sorted(self._heap, reverse=True)]


class _Query:
    """Per-query state: the prepared point, the counter and the memo."""

    __slots__ = ("tree", "metric", "data", "q", "count", "memo", "perm")

    def __init__(self, tree, q):
        self.tree = tree
        self.metric = tree.metric
        self.data = tree.dataset
        self.q = self.metric.prepare(q)
        self.count = 0
        self.memo = {}
        self.perm = tree.dataset.permutation

    def dist(self, pos):
        d = self.memo.get(pos)
        if d is None:
            d = self.metric.distance(self.q, self.data.point(pos))
            self.memo[pos] = d
            self.count += 1
        return d

    def members(self, c, delta):
        """Member positions of ``c`` and their distances to the query."""
        pos = self.tree.members(c)
        if c.cardinality == 1:
            return pos, np.array([delta])
        dists = self.metric.one_to_many(self.q, self.tree.batch(c))
        # memoized members are reused, not counted again
        memo = self.memo
        for j, p in enumerate(pos.tolist()):
            known = memo.get(p)
            if known is None:
                memo[p] = float(dists[j])
                self.count += 1
            else:
                dists[j] = known
        return pos, dists


def _select(perm, positions, dists, k):
    """The ``k`` best by (distance, original index) as a neighbor list."""
    orig = perm[positions]
    order = np.lexsort((orig, dists))
    if k is not None:
        order = order[:k]
    return [(int(orig[i]), float(dists[i])) for i in order]


def _select_original(orig, dists, k):
    order = np.lexsort((orig, dists))[:k]
    return [(int(orig[i]), float(dists[i])) for i in order]


def _check_k(tree, k):
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
        raise TypeError(f"k must be an integer, got {k!r}")
    if not 1 <= k <= tree.cardinality:
        raise ValueError(f"k must be in [1, {tree.cardinality}], got {k}")


def _compiled(backend):
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    return backend == "compiled"


def deltas(tree, c, q):
    """δ, δ⁺ and δ⁻ of cluster ``c`` for query ``q`` (one evaluation)."""
    ctx = q if isinstance(q, _Query) else _Query(tree, q)
    return DeltaTriple.of(ctx.dist(c.center), c.radius)


def prune_to_children(c, rho, d_ql, d_qr, hyperplane_exact=True, code=0):
    """Children of ``c`` that may hold points within ``rho`` of the query.

    ``d_ql``/``d_qr`` are the query's distances to the left and right poles.
    With ``hyperplane_exact`` the far child is dropped when the query's
    projection onto the pole axis is more than ``rho`` past the midpoint:
    ``(d_far + d_near)(d_far - d_near) > 2 * f(l, r) * rho``. Otherwise the
    metric-only bound ``(d_far - d_near) / 2 > rho`` is used. ``code`` names
    the distance, so that cosine is bounded through its chord.
    """
    if c.left is None:
        return []
    if c.balanced:
        return [c.left, c.right]
    if d_qr <= d_ql:
        near, far, a, b = c.right, c.left, d_ql, d_qr
    else:
        near, far, a, b = c.left, c.right, d_qr, d_ql
    if keep_far_child(code, hyperplane_exact, a, b, c.pole_distance, rho):
        return [c.left, c.right]
    return [near]


def _tree_search(ctx, rho, prune=True):
    """Clusters overlapping the query ball, as ``(cluster, δ)`` pairs."""
    root = ctx.tree.root
    exact = ctx.metric.hyperplane_exact
    code = ctx.metric.code
    d = ctx.dist(root.center)
    if lower_bound(code, d, root.radius) > rho:
        return []
    found = []
    stack = [(root, d)]
    while stack:
        c, d = stack.pop()
        if c.left is None or inside(code, d, c.radius, rho):
            found.append((c, d))
            continue
        kept = [(ch, ctx.dist(ch.center)) for ch in (c.left, c.right)]
        kept = [(ch, dc) for ch, dc in kept if lower_bound(code, dc, ch.radius) <= rho]
        # the pole test can only drop a child that survived its own bound
        if prune and len(kept) == 2 and not c.balanced:
            children = prune_to_children(
                c, rho, ctx.dist(c.arg_radial), ctx.dist(c.arg_pole), exact, code
            )
            kept = [(ch, dc) for ch, dc in kept if ch in children]
        stack.extend(kept)
    return found


def rnn_tree_search(tree, q, rho, prune=True):
    """Clusters that overlap the ball ``B(q, rho)``.

    Clusters fully inside the ball are returned without descending into
    them.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    ctx = q if isinstance(q, _Query) else _Query(tree, q)
    return [c for c, _ in _tree_search(ctx, rho, prune)]


def _leaf_search(ctx, found, rho, return_distance=True):
    positions, dists = [], []
    for c, d in found:
        if not return_distance and inside(ctx.metric.code, d, c.radius, rho):
            pos = ctx.tree.members(c)
            positions.append(pos)
            dists.append(np.full(len(pos), np.nan))
            continue
        pos, dd = ctx.members(c, d)
        keep = dd <= rho
        positions.append(pos[keep])
        dists.append(dd[keep])
    if not positions:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(positions), np.concatenate(dists)


def rnn_leaf_search(tree, clusters, q, rho, return_distance=True):
    """Points of ``clusters`` within ``rho`` of ``q`` as ``(original, distance)``."""
    ctx = q if isinstance(q, _Query) else _Query(tree, q)
    found = [(c, ctx.dist(c.center)) for c in clusters]
    pos, dists = _leaf_search(ctx, found, rho, return_distance)
    return _select(ctx.perm, pos, dists, None)


def rho_nn(tree, q, rho, prune=True, return_distance=True, backend="compiled"):
    """All points within ``rho`` of ``q``: tree-search, then leaf-search."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    t0 = time.perf_counter()
    if _compiled(backend):
        pos, dists, count = tree.engine().rho_nn(q, rho, prune)
        neighbors = _select(tree.dataset.permutation, pos, dists, None)
        return SearchReport(neighbors, count, time.perf_counter() - t0, "rho-nn")
    ctx = _Query(tree, q)
    found = _tree_search(ctx, rho, prune)
    pos, dists = _leaf_search(ctx, found, rho, return_distance)
    if return_distance:
        neighbors = _select(ctx.perm, pos, dists, None)
    else:
        neighbors = sorted((int(ctx.perm[p]), float(d)) for p, d in zip(pos, dists))
    return SearchReport(neighbors, ctx.count, time.perf_counter() - t0, "rho-nn")


def _gather(ctx, found, done):
    positions, dists = [], []
    for c, d in found:
        key = id(c)
        if key not in done:
            done[key] = ctx.members(c, d)
        pos, dd = done[key]
        positions.append(pos)
        dists.append(dd)
    return np.concatenate(positions), np.concatenate(dists)


def _growth_factor(found, k):
    """Radius multiplier from the harmonic-mean LFD of the found clusters."""
    total = sum(c.cardinality for c, _ in found)
    if any(c.lfd <= 0.0 for c, _ in found):
        return 2.0
    mu = sum(1.0 / c.lfd for c, _ in found) / len(found)
    exponent = mu * math.log(k / total)
    if exponent >= math.log(2.0):
        return 2.0
    return math.exp(exponent)


def knn_repeated_rnn(tree, q, k, backend="compiled"):
    """k-NN by ρ-NN searches with a radius grown until k points are covered."""
    _check_k(tree, k)
    t0 = time.perf_counter()
    if _compiled(backend):
        perm = tree.dataset.permutation
        neighbors, count, radii = tree.engine().repeated_rnn(
            q, k, lambda pos, dists, k: _select(perm, pos, dists, k)
        )
        return SearchReport(neighbors, count, time.perf_counter() - t0, "repeated-rnn", radii)
    ctx = _Query(tree, q)
    root = tree.root
    if root.radius == 0.0:
        d = ctx.dist(root.center)
        pos = tree.members(root)
        neighbors = _select(ctx.perm, pos, np.full(len(pos), d), k)
        return SearchReport(neighbors, ctx.count, time.perf_counter() - t0, "repeated-rnn")
    radius = root.radius / root.cardinality
    radii = [radius]
    found = _tree_search(ctx, radius)
    while sum(c.cardinality for c, _ in found) < k:
        radius *= _growth_factor(found, k) if found else 2.0
        radii.append(radius)
        found = _tree_search(ctx, radius)
    done = {}
    pos, dists = _gather(ctx, found, done)
    neighbors = _select(ctx.perm, pos, dists, k)
    kth = neighbors[-1][1]
    if kth > radius:
        # points between the radius and the k-th candidate may sit in
        # clusters the last tree-search never saw
        radii.append(kth)
        pos, dists = _gather(ctx, _tree_search(ctx, kth), done)
        neighbors = _select(ctx.perm, pos, dists, k)
    return SearchReport(neighbors, ctx.count, time.perf_counter() - t0, "repeated-rnn", radii)


def _tau(keys, mults, k):
    """Smallest key whose cumulative multiplicity reaches ``k``."""
    keys = np.asarray(keys, dtype=np.float64)
    mults = np.asarray(mults, dtype=np.int64)
    if mults.sum() < k:
        raise ValueError(f"multiplicities sum to {int(mults.sum())} < k = {k}")
    while True:
        n = len(keys)
        pivot = float(np.median(keys[[0, n // 2, n - 1]])) if n > 2 else float(keys[0])
        below = keys < pivot
        m_below = int(mults[below].sum())
        if m_below >= k:
            keys, mults = keys[below], mults[below]
            continue
        at = keys == pivot
        m_at = int(mults[at].sum())
        if m_below + m_at >= k:
            return pivot
        k -= m_below + m_at
        above = ~(below | at)
        keys, mults = keys[above], mults[above]


def quickselect_tau(entries, k):
    """Threshold τ: the smallest δ⁺ such that entries with δ⁺ ≤ τ hold ≥ k points.

    ``entries`` (a list of :class:`CandidateEntry`) is reordered in place so
    that entries with δ⁺ ≤ τ come first, in their original relative order.
    """
    keys = [e.delta_plus for e in entries]
    mults = [e.multiplicity for e in entries]
    tau = _tau(keys, mults, k)
    entries[:] = [e for e in entries if e.delta_plus <= tau] + [
        e for e in entries if e.delta_plus > tau
    ]
    return tau


def knn_breadth_first_sieve(tree, q, k, backend="compiled"):
    """Level-wise k-NN, pruning with the τ threshold at every level.

    A cluster entry's multiplicity counts only members not already present
    as point entries (its own center and any ancestor centers inside it).
    """
    _check_k(tree, k)
    t0 = time.perf_counter()
    if _compiled(backend):
        pos, dists, count = tree.engine().breadth_sieve(q, k)
        neighbors = _select(tree.dataset.permutation, pos, dists, k)
        return SearchReport(neighbors, count, time.perf_counter() - t0, "breadth-sieve")
    ctx = _Query(tree, q)
    code = tree.metric.code
    root = tree.root
    d = ctx.dist(root.center)
    points = [(root.center, d)]
    clusters = [(root, d, [root.center])] if root.cardinality > 1 else []
    while clusters:
        keys = [pd for _, pd in points]
        keys.extend(upper_bound(code, cd, c.radius) for c, cd, _ in clusters)
        mults = [1] * len(points)
        mults.extend(c.cardinality - len(inside) for c, _, inside in clusters)
        tau = _tau(keys, mults, k)
        points = [(p, pd) for p, pd in points if pd <= tau]
        expanded = []
        for c, cd, inside in clusters:
            if lower_bound(code, cd, c.radius) > tau:
                continue
            if c.left is None:
                pos, dd = ctx.members(c, cd)
                emitted = set(inside)
                points.extend(
                    (int(p), float(x)) for p, x in zip(pos, dd) if int(p) not in emitted
                )
                continue
            for child in (c.left, c.right):
                child_inside = [p for p in inside if tree.contains(child, p)]
                dc = ctx.dist(child.center)
                if child.center not in child_inside:
                    points.append((child.center, dc))
                    child_inside.append(child.center)
                if child.cardinality > len(child_inside):
                    expanded.append((child, dc, child_inside))
        clusters = expanded
    pos = np.fromiter((p for p, _ in points), dtype=np.int64, count=len(points))
    dists = np.fromiter((x for _, x in points), dtype=np.float64, count=len(points))
    neighbors = _select(ctx.perm, pos, dists, k)
    return SearchReport(neighbors, ctx.count, time.perf_counter() - t0, "breadth-sieve")


def knn_depth_first_sieve(tree, q, k, backend="compiled"):
    """Best-first k-NN: descend into the cluster with the smallest δ⁻."""
    _check_k(tree, k)
    t0 = time.perf_counter()
    if _compiled(backend):
        orig, dists, count = tree.engine().depth_sieve(q, k)
        neighbors = _select_original(orig, dists, k)
        return SearchReport(neighbors, count, time.perf_counter() - t0, "depth-sieve")
    ctx = _Query(tree, q)
    code = tree.metric.code
    perm = ctx.perm
    hits = Hits(k)
    tick = itertools.count()
    root = tree.root
    d = ctx.dist(root.center)
    queue = [(lower_bound(code, d, root.radius), next(tick), root, d)]
    while queue and (not hits.full or hits.worst >= queue[0][0]):
        while queue[0][2].left is not None:
            _, _, c, _ = heapq.heappop(queue)
            for child in (c.left, c.right):
                dc = ctx.dist(child.center)
                dmin = lower_bound(code, dc, child.radius)
                if hits.full and dmin > hits.worst:
                    continue
                heapq.heappush(queue, (dmin, next(tick), child, dc))
            if not queue:
                break
        if not queue:
            break
        _, _, leaf, ld = heapq.heappop(queue)
        if leaf.cardinality == 1:
            hits.push(int(perm[leaf.center]), ld)
            continue
        pos, dd = ctx.members(leaf, ld)
        if hits.full:
            keep = dd <= hits.worst
            pos, dd = pos[keep], dd[keep]
        for p, x in zip(perm[pos].tolist(), dd.tolist()):
            hits.push(p, x)
    neighbors = hits.items()
    return SearchReport(neighbors, ctx.count, time.perf_counter() - t0, "depth-sieve")


def linear_knn(source, q, k, metric=None, backend=None):
    """Exhaustive k-NN; ``source`` is a Tree or a Dataset plus ``metric``."""
    metric, data = _source(source, metric)
    if not 1 <= k <= len(data):
        raise ValueError(f"k must be in [1, {len(data)}], got {k}")
    t0 = time.perf_counter()
    dists = metric.one_to_many(metric.prepare(q), data.points)
    neighbors = _select(data.permutation, np.arange(len(data)), dists, k)
    return SearchReport(neighbors, len(data), time.perf_counter() - t0, "linear")


def linear_rnn(source, q, rho, metric=None):
    """Exhaustive ρ-NN."""
    metric, data = _source(source, metric)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    t0 = time.perf_counter()
    dists = metric.one_to_many(metric.prepare(q), data.points)
    keep = np.flatnonzero(dists <= rho)
    neighbors = _select(data.permutation, keep, dists[keep], None)
    return SearchReport(neighbors, len(data), time.perf_counter() - t0, "linear")


def _source(source, metric):
    if isinstance(source, Tree):
        return source.metric, source.dataset
    if isinstance(source, Dataset):
        if metric is None:
            raise ValueError("a metric is required when searching a bare Dataset")
        return get_metric(metric), source
    raise TypeError(f"cannot search {type(source).__name__}")


TREE_ALGORITHMS = {
    "repeated-rnn": knn_repeated_rnn,
    "breadth-sieve": knn_breadth_first_sieve,
    "depth-sieve": knn_depth_first_sieve,
}

KNN_ALGORITHMS = dict(TREE_ALGORITHMS, linear=linear_knn)


def knn(tree, q, k, algorithm="depth-sieve", backend="compiled"):
    try:
        fn = KNN_ALGORITHMS[algorithm]
    except KeyError:
        raise ValueError(
            f"unknown algorithm {algorithm!r}; choose from {sorted(KNN_ALGORITHMS)}"
        ) from None
    return fn(tree, q, k, backend=backend)
