"""Divisive cluster tree.

Each cluster is split around two poles: the point farthest from the
(sampled) geometric median, and the point farthest from that one. Points go
to whichever pole is nearer, with ties to the left. The result is usually
unbalanced, which is the point: dense regions of the data get deep, narrow
subtrees.

After building, :func:`depth_first_reorder` permutes the dataset so that
every cluster owns a contiguous range ``[offset, offset + cardinality)``.
"""

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .dataset import Dataset, apply_permutation
from .metrics import get_metric, pair_distance

__all__ = [
    "Cluster",
    "PartitionCriteria",
    "Tree",
    "geometric_median",
    "partition",
    "lfd",
    "build",
    "depth_first_reorder",
    "metric_entropy",
    "lfd_report",
    "save_tree",
    "load_tree",
    "STRATEGIES",
    "TreeStateError",
]

STRATEGIES = ("unbalanced", "balanced")

# Clusters at or below this size use every member for the median.
FULL_MEDIAN_LIMIT = 100

PERCENTILES = (0, 5, 25, 50, 75, 95, 100)


class TreeStateError(RuntimeError):
    """Raised when an operation is applied to a tree in the wrong state."""


@dataclass
class PartitionCriteria:
    """Continuation criteria: a cluster is split only if all of these hold.

    ``min_cardinality`` is the largest cardinality that is still a leaf, so
    the default of 1 splits down to singletons.
    """

    min_cardinality: int = 1
    min_radius: float = 0.0
    max_depth: int | None = None

    def __post_init__(self):
        if self.min_cardinality < 1:
            raise ValueError("min_cardinality must be >= 1")
        if self.min_radius < 0:
            raise ValueError("min_radius must be non-negative")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")

    def allows(self, c):
        return (
            c.cardinality > max(1, self.min_cardinality)
            and c.radius > self.min_radius
            and (self.max_depth is None or c.depth < self.max_depth)
        )


class Cluster:
    """A node of the tree.

    ``center``, ``arg_radial`` (left pole) and ``arg_pole`` (right pole) are
    stored positions in the tree's dataset; map them through
    ``Tree.original`` for original indices. ``indices`` holds the member
    positions only while the tree is not reordered.
    """

    __slots__ = (
        "center",
        "radius",
        "offset",
        "cardinality",
        "lfd",
        "depth",
        "left",
        "right",
        "arg_radial",
        "arg_pole",
        "pole_distance",
        "balanced",
        "indices",
    )

    def __init__(self, center, radius, offset, cardinality, lfd, depth, arg_radial, indices=None):
        self.center = center
        self.radius = radius
        self.offset = offset
        self.cardinality = cardinality
        self.lfd = lfd
        self.depth = depth
        self.arg_radial = arg_radial
        self.indices = indices
        self.left = None
        self.right = None
        self.arg_pole = -1
        self.pole_distance = 0.0
        self.balanced = False

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def children(self):
        if self.left is None:
            return None
        return self.left, self.right

    def __repr__(self):
        return (
            f"Cluster(depth={self.depth}, offset={self.offset}, "
            f"cardinality={self.cardinality}, radius={self.radius:.6g}, lfd={self.lfd:.3f})"
        )


class Tree:
    """A built cluster tree over a dataset."""

    def __init__(self, root, dataset, metric, criteria, strategy, seed, rank=None):
        self.root = root
        self.dataset = dataset
        self.metric = get_metric(metric)
        self.criteria = criteria
        self.strategy = strategy
        self.seed = seed
        self.permuted = rank is None
        self._rank = rank
        self._engine = None

    def engine(self):
        """Flattened copy for compiled search, built on first use."""
        if self._engine is None:
            from .engine import Engine

            self._engine = Engine(self)
        return self._engine

    @property
    def cardinality(self):
        return self.root.cardinality

    def original(self, pos):
        return int(self.dataset.permutation[pos])

    def members(self, c):
        """Stored positions of the points of ``c``."""
        if self.permuted:
            return np.arange(c.offset, c.offset + c.cardinality)
        return c.indices

    def batch(self, c):
        if self.permuted:
            return self.dataset.span(c.offset, c.offset + c.cardinality)
        return self.dataset.take(c.indices)

    def contains(self, c, pos):
        r = pos if self._rank is None else self._rank[pos]
        return c.offset <= r < c.offset + c.cardinality

    def clusters(self):
        """All clusters in preorder (node, left subtree, right subtree)."""
        stack = [self.root]
        while stack:
            c = stack.pop()
            yield c
            if c.left is not None:
                stack.append(c.right)
                stack.append(c.left)

    def leaves(self):
        return (c for c in self.clusters() if c.left is None)

    @property
    def max_depth(self):
        return max(c.depth for c in self.clusters())

    def __repr__(self):
        return (
            f"Tree(distance={self.metric.name!r}, strategy={self.strategy!r}, "
            f"cardinality={self.cardinality}, permuted={self.permuted})"
        )


def geometric_median(d, metric, positions):
    """Position of the member minimizing the sum of distances to the others.

    Ties go to the smallest original index.
    """
    positions = np.asarray(positions)
    if len(positions) == 1:
        return int(positions[0])
    metric = get_metric(metric)
    # sequential row sums, matching the accumulation order of the build
    sums = np.cumsum(metric.pairwise(d.take(positions)), axis=1)[:, -1]
    return _argext(sums, positions, d.permutation, np.min)


def _argext(values, positions, permutation, ext):
    """Position of the extreme value; ties by smallest original index."""
    hits = np.flatnonzero(values == ext(values))
    if len(hits) == 1:
        return int(positions[hits[0]])
    cands = positions[hits]
    return int(cands[np.argmin(permutation[cands])])


def lfd(cardinality, center_distances, radius):
    """log2 of |C| over the number of members within half the radius."""
    if radius <= 0.0:
        return 0.0
    inner = int(np.count_nonzero(center_distances <= radius / 2.0))
    return math.log2(cardinality / inner)


def partition(c, d, metric, strategy="unbalanced"):
    """Split ``c`` around its poles; returns the (left, right) member arrays.

    Sets ``c.arg_pole`` and ``c.pole_distance``. The left pole is
    ``c.arg_radial``; the right pole is the member farthest from it.
    """
    idx = np.asarray(c.indices)
    batch = d.take(idx)
    left_pole = c.arg_radial
    dl = metric.one_to_many(metric.prepare(d.point(left_pole)), batch)
    right_pole = _argext(dl, idx, d.permutation, np.max)
    dr = metric.one_to_many(metric.prepare(d.point(right_pole)), batch)
    c.arg_pole = right_pole
    c.pole_distance = float(dl.max())
    if strategy == "unbalanced":
        mask = dl <= dr
        return idx[mask], idx[~mask]
    if strategy == "balanced":
        c.balanced = True
        order = np.lexsort((d.permutation[idx], dl - dr))
        half = (len(idx) + 1) // 2
        return idx[order[:half]], idx[order[half:]]
    raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


# --- compiled build ---------------------------------------------------------
#
# The whole recursion runs in one compiled call. ``order`` starts as the
# identity and every cluster owns the segment ``order[offset:offset+card]``;
# splitting a cluster rearranges its segment so the left child's members
# come first. When the build is done ``order`` lists the points leaf by
# leaf, which is exactly the depth-first reordering.

@njit(cache=True)
def _arg_extreme(values, members, perm, largest):
    """Member with the extreme value; ties to the smallest original index."""
    best = 0
    for i in range(1, len(values)):
        v, b = values[i], values[best]
        better = v > b if largest else v < b
        if better or (v == b and perm[members[i]] < perm[members[best]]):
            best = i
    return best


@njit(cache=True)
def _ceil_sqrt(n):
    r = int(math.sqrt(n))
    while r * r < n:
        r += 1
    while r > 1 and (r - 1) * (r - 1) >= n:
        r -= 1
    return r


@njit(cache=True)
def _to_many(code, data, src, members, out):
    buf, starts, ends = data
    a = buf[starts[src]:ends[src]]
    for i in range(len(members)):
        p = members[i]
        out[i] = pair_distance(code, a, buf[starts[p]:ends[p]])


@njit(cache=True)
def _build(code, data, perm, balanced, min_card, min_radius, max_depth, seed, full_limit):
    n = len(perm)
    m = 2 * n - 1
    center = np.empty(m, dtype=np.int64)
    radius = np.empty(m, dtype=np.float64)
    offset = np.empty(m, dtype=np.int64)
    card = np.empty(m, dtype=np.int64)
    lfd_ = np.empty(m, dtype=np.float64)
    depth = np.empty(m, dtype=np.int64)
    left = np.full(m, -1, dtype=np.int64)
    right = np.full(m, -1, dtype=np.int64)
    pole_l = np.empty(m, dtype=np.int64)
    pole_r = np.full(m, -1, dtype=np.int64)
    pole_d = np.zeros(m, dtype=np.float64)
    order = np.arange(n)
    buf, starts, ends = data
    np.random.seed(seed)

    dist_a = np.empty(n, dtype=np.float64)
    dist_b = np.empty(n, dtype=np.float64)
    scratch = np.empty(n, dtype=np.int64)

    # stack rows: offset, cardinality, depth, parent id, side (0 left, 1 right)
    stack = np.empty((n + 64, 5), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = n
    stack[0, 2] = 0
    stack[0, 3] = -1
    stack[0, 4] = 0
    top = 1
    count = 0
    while top > 0:
        top -= 1
        off, cn, dep, parent, side = stack[top, 0], stack[top, 1], stack[top, 2], stack[top, 3], stack[top, 4]
        cid = count
        count += 1
        if parent >= 0:
            if side == 0:
                left[parent] = cid
            else:
                right[parent] = cid
        offset[cid] = off
        card[cid] = cn
        depth[cid] = dep
        members = order[off:off + cn]

        # center: geometric median of a sample
        if cn == 1:
            c = members[0]
            center[cid] = c
            radius[cid] = 0.0
            lfd_[cid] = 0.0
            pole_l[cid] = c
            continue
        if cn <= full_limit:
            sample = members.copy()
        else:
            size = _ceil_sqrt(cn)
            picks = np.sort(np.random.choice(cn, size, replace=False))
            sample = members[picks]
        s = len(sample)
        sums = np.zeros(s, dtype=np.float64)
        for i in range(s):
            a = buf[starts[sample[i]]:ends[sample[i]]]
            for j in range(i + 1, s):
                v = pair_distance(code, a, buf[starts[sample[j]]:ends[sample[j]]])
                sums[i] += v
                sums[j] += v
        c = sample[_arg_extreme(sums, sample, perm, False)]
        center[cid] = c

        dc = dist_a[:cn]
        _to_many(code, data, c, members, dc)
        far = _arg_extreme(dc, members, perm, True)
        r = dc[far]
        radius[cid] = r
        pole_l[cid] = members[far]
        if r <= 0.0:
            lfd_[cid] = 0.0
        else:
            inner = 0
            for i in range(cn):
                if dc[i] <= r / 2.0:
                    inner += 1
            lfd_[cid] = math.log2(cn / inner)

        if not (cn > max(1, min_card) and r > min_radius and (max_depth < 0 or dep < max_depth)):
            continue

        # split around the poles
        lp = members[far]
        dl = dist_a[:cn]
        _to_many(code, data, lp, members, dl)
        rfar = _arg_extreme(dl, members, perm, True)
        rp = members[rfar]
        pole_r[cid] = rp
        pole_d[cid] = dl[rfar]
        dr = dist_b[:cn]
        _to_many(code, data, rp, members, dr)
        tmp = scratch[:cn]
        if balanced:
            by_index = np.argsort(perm[members], kind="mergesort")
            diff = (dl - dr)[by_index]
            ranked = by_index[np.argsort(diff, kind="mergesort")]
            for i in range(cn):
                tmp[i] = members[ranked[i]]
            n_left = (cn + 1) // 2
        else:
            n_left = 0
            for i in range(cn):
                if dl[i] <= dr[i]:
                    tmp[n_left] = members[i]
                    n_left += 1
            w = n_left
            for i in range(cn):
                if not dl[i] <= dr[i]:
                    tmp[w] = members[i]
                    w += 1
        members[:] = tmp

        # right first so the left child pops next (preorder)
        stack[top, 0] = off + n_left
        stack[top, 1] = cn - n_left
        stack[top, 2] = dep + 1
        stack[top, 3] = cid
        stack[top, 4] = 1
        stack[top + 1, 0] = off
        stack[top + 1, 1] = n_left
        stack[top + 1, 2] = dep + 1
        stack[top + 1, 3] = cid
        stack[top + 1, 4] = 0
        top += 2

    return (center[:count], radius[:count], offset[:count], card[:count], lfd_[:count],
            depth[:count], left[:count], right[:count], pole_l[:count], pole_r[:count],
            pole_d[:count], order)


def _data_arrays(d):
    """``(buffer, starts, ends)`` view of any dataset."""
    pts = d.points
    if d.is_ragged:
        return pts.buffer, pts.starts, pts.ends
    pts = np.ascontiguousarray(pts)
    n, dim = pts.shape
    starts = np.arange(n, dtype=np.int64) * dim
    return pts.reshape(-1), starts, starts + dim


def build(d, metric, criteria=None, strategy="unbalanced", seed=0):
    """Build the full tree over ``d``; deterministic for a fixed seed.

    The tree is left in the dataset's order (not reordered); each cluster
    carries its member positions in ``indices``.
    """
    if not isinstance(d, Dataset):
        raise TypeError("build expects a Dataset")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    metric = get_metric(metric)
    criteria = criteria or PartitionCriteria()
    data = _data_arrays(d)
    if metric.name == "hamming" and d.is_ragged:
        lengths = d.points.lengths()
        if np.any(lengths != lengths[0]):
            raise ValueError("length mismatch: hamming needs equal-length sequences")
    if metric.kind == "series" and d.is_ragged and d.points.buffer.dtype.kind not in "fc":
        data = (data[0].astype(np.float64), data[1], data[2])
    max_depth = -1 if criteria.max_depth is None else criteria.max_depth
    (center, radius, offset, card, lfd_, depth, left, right, pole_l, pole_r, pole_d,
     order) = _build(metric.code, data, d.permutation, strategy == "balanced",
                     criteria.min_cardinality, float(criteria.min_radius), max_depth,
                     seed % 2**32, FULL_MEDIAN_LIMIT)
    balanced = strategy == "balanced"
    clusters = []
    for i in range(len(center)):
        c = Cluster(int(center[i]), float(radius[i]), int(offset[i]), int(card[i]),
                    float(lfd_[i]), int(depth[i]), int(pole_l[i]),
                    order[offset[i]:offset[i] + card[i]])
        if left[i] >= 0:
            c.arg_pole = int(pole_r[i])
            c.pole_distance = float(pole_d[i])
            c.balanced = balanced
        clusters.append(c)
    for i in np.flatnonzero(left >= 0).tolist():
        clusters[i].left = clusters[left[i]]
        clusters[i].right = clusters[right[i]]
    rank = np.empty(len(d), dtype=np.int64)
    rank[order] = np.arange(len(d))
    return Tree(clusters[0], d, metric, criteria, strategy, seed, rank=rank)


def depth_first_reorder(tree):
    """Permute the dataset into depth-first order and drop index lists.

    Mutates and returns ``tree``. Afterwards each cluster is addressed only
    by ``offset`` and ``cardinality``.
    """
    if tree.permuted:
        raise TreeStateError("tree is already reordered")
    rank = tree._rank
    order = np.empty_like(rank)
    order[rank] = np.arange(len(rank))
    tree.dataset = apply_permutation(tree.dataset, order)
    for c in tree.clusters():
        c.center = int(rank[c.center])
        c.arg_radial = int(rank[c.arg_radial])
        if c.arg_pole >= 0:
            c.arg_pole = int(rank[c.arg_pole])
        c.indices = None
    tree._rank = None
    tree._engine = None
    tree.permuted = True
    return tree


def metric_entropy(tree):
    """Number of leaves and their mean radius."""
    radii = [c.radius for c in tree.leaves()]
    return len(radii), float(np.mean(radii))


def lfd_report(tree):
    """Cardinality-weighted LFD percentiles per depth.

    Returns rows ``(depth, min, p5, p25, p50, p75, p95, max)``.
    """
    by_depth = {}
    for c in tree.clusters():
        by_depth.setdefault(c.depth, ([], []))
        by_depth[c.depth][0].append(c.lfd)
        by_depth[c.depth][1].append(c.cardinality)
    rows = []
    for depth in sorted(by_depth):
        lfds, weights = (np.asarray(v, dtype=np.float64) for v in by_depth[depth])
        inner = np.percentile(lfds, PERCENTILES[1:-1], weights=weights, method="inverted_cdf")
        rows.append((depth, float(lfds.min()), *map(float, inner), float(lfds.max())))
    return rows


# --- serialization ----------------------------------------------------------

# center, radius, offset, cardinality, lfd, is_leaf, depth, left pole,
# right pole (-1 for leaves), pole distance, balanced split
_RECORD = struct.Struct("<qdqqd?qqqd?")


def save_tree(tree, path):
    """Write the header line, the permutation, and preorder cluster records.

    Trees that are not reordered also carry every cluster's member list;
    reordered trees carry none.
    """
    perm = tree.dataset.permutation
    header = {
        "distance": tree.metric.name,
        "strategy": tree.strategy,
        "seed": tree.seed,
        "cardinality": tree.cardinality,
        "dimensionality": tree.dataset.dimensionality,
        "permuted": tree.permuted,
        "criteria": asdict(tree.criteria),
        "clusters": sum(1 for _ in tree.clusters()),
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(np.ascontiguousarray(perm, dtype="<u8").tobytes())
    for c in tree.clusters():
        buf.write(_RECORD.pack(
            int(perm[c.center]), c.radius, c.offset, c.cardinality, c.lfd,
            c.left is None, c.depth, int(perm[c.arg_radial]),
            int(perm[c.arg_pole]) if c.arg_pole >= 0 else -1,
            c.pole_distance, c.balanced,
        ))
    if not tree.permuted:
        for c in tree.clusters():
            buf.write(np.ascontiguousarray(perm[c.indices], dtype="<u8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_tree_header(path):
    with open(path, "rb") as fh:
        return json.loads(fh.readline())


def load_tree(path, dataset):
    """Rebuild a tree from ``path`` over ``dataset`` given in original order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl])
    n = header["cardinality"]
    if len(dataset) != n:
        raise ValueError(f"tree has cardinality {n}, dataset has {len(dataset)}")
    if not np.array_equal(dataset.permutation, np.arange(n)):
        raise ValueError("load_tree expects the dataset in original order")
    pos = nl + 1
    perm = np.frombuffer(blob, dtype="<u8", count=n, offset=pos).astype(np.int64)
    pos += 8 * n
    records = []
    for _ in range(header["clusters"]):
        records.append(_RECORD.unpack_from(blob, pos))
        pos += _RECORD.size
    permuted = header["permuted"]
    if permuted:
        dataset = apply_permutation(dataset, perm)
        where = np.empty(n, dtype=np.int64)
        where[perm] = np.arange(n)
    else:
        where = np.arange(n)
    clusters = []
    for rec in records:
        center, radius, offset, card, lfd_, is_leaf, depth, lp, rp, pd, bal = rec
        c = Cluster(int(where[center]), radius, offset, card, lfd_, depth, int(where[lp]))
        c.arg_pole = int(where[rp]) if rp >= 0 else -1
        c.pole_distance = pd
        c.balanced = bal
        clusters.append((c, is_leaf))
    if not permuted:
        for c, _ in clusters:
            c.indices = np.frombuffer(blob, dtype="<u8", count=c.cardinality, offset=pos).astype(np.int64)
            pos += 8 * c.cardinality
    root = _link_preorder(clusters)
    criteria = PartitionCriteria(**header["criteria"])
    rank = None
    if not permuted:
        rank = np.empty(n, dtype=np.int64)
        order = np.concatenate([c.indices for c, leaf in clusters if leaf])
        rank[order] = np.arange(n)
    return Tree(root, dataset, header["distance"], criteria, header["strategy"], header["seed"], rank=rank)


def _link_preorder(clusters):
    it = iter(clusters)

    def take():
        c, is_leaf = next(it)
        return c, is_leaf

    root, root_leaf = take()
    stack = [] if root_leaf else [(root, 0)]
    while stack:
        parent, filled = stack.pop()
        child, leaf = take()
        if filled == 0:
            parent.left = child
            stack.append((parent, 1))
        else:
            parent.right = child
        if not leaf:
            stack.append((child, 0))
    return root
