import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sievetree.dataset import Dataset
from sievetree.generate import manifold, random_strings
from sievetree.metrics import get_metric
from sievetree.tree import (
    PartitionCriteria,
    TreeStateError,
    build,
    depth_first_reorder,
    geometric_median,
    lfd,
    lfd_report,
    load_tree,
    metric_entropy,
    partition,
    read_tree_header,
    save_tree,
)

FIVE = Dataset(np.array([[0.0], [1.0], [2.0], [3.0], [10.0]]))


def value(tree, pos):
    return float(tree.dataset.point(pos)[0])


def members(tree, c):
    return sorted(tree.original(int(p)) for p in tree.members(c))


def check_structure(tree):
    """Partition, offset and LFD invariants over every cluster."""
    metric = tree.metric
    ds = tree.dataset
    for c in tree.clusters():
        mem = tree.members(c)
        assert len(mem) == c.cardinality >= 1
        dists = metric.one_to_many(metric.prepare(ds.point(c.center)), ds.take(mem))
        assert c.radius == dists.max()
        assert 0.0 <= c.lfd <= math.log2(c.cardinality) + 1e-12
        if c.is_leaf:
            continue
        left, right = c.children
        assert left.cardinality + right.cardinality == c.cardinality
        assert left.offset == c.offset and right.offset == c.offset + left.cardinality
        assert left.depth == right.depth == c.depth + 1
        both = members(tree, left) + members(tree, right)
        assert sorted(both) == members(tree, c)
        if not c.balanced:
            lp = metric.prepare(ds.point(c.arg_radial))
            rp = metric.prepare(ds.point(c.arg_pole))
            for p in tree.members(left):
                assert metric.distance(lp, ds.point(p)) <= metric.distance(rp, ds.point(p))
            for p in tree.members(right):
                assert metric.distance(rp, ds.point(p)) < metric.distance(lp, ds.point(p))
    spans = sorted((c.offset, c.cardinality) for c in tree.leaves())
    cursor = 0
    for off, card in spans:
        assert off == cursor
        cursor += card
    assert cursor == tree.cardinality == tree.root.cardinality and tree.root.offset == 0


class TestGeometricMedian:
    def test_single(self):
        assert geometric_median(FIVE, "euclidean", [3]) == 3

    def test_five_points(self):
        # sums: 0->16, 1->13, 2->12, 3->13, 10->36
        sums = [sum(abs(a - b) for b in (0, 1, 2, 3, 10)) for a in (0, 1, 2, 3, 10)]
        assert int(np.argmin(sums)) == 2
        assert geometric_median(FIVE, "euclidean", range(5)) == 2

    def test_tie_smallest_index(self):
        d = Dataset(np.array([[5.0], [1.0]]))
        assert geometric_median(d, "euclidean", [0, 1]) == 0


class TestPartition:
    def test_five_point_example(self):
        tree = build(FIVE, "euclidean", PartitionCriteria(max_depth=1))
        root = tree.root
        assert value(tree, root.center) == 2.0
        assert root.radius == 8.0
        assert value(tree, root.arg_radial) == 10.0
        assert value(tree, root.arg_pole) == 0.0
        assert members(tree, root.left) == [4]
        assert members(tree, root.right) == [0, 1, 2, 3]

    def test_python_partition_agrees(self):
        tree = build(FIVE, "euclidean", PartitionCriteria(max_depth=1))
        root = tree.root
        left, right = partition(root, FIVE, get_metric("euclidean"))
        assert sorted(left) == [4] and sorted(right) == [0, 1, 2, 3]

    def test_two_points(self):
        tree = build(Dataset(np.array([[0.0], [1.0]])), "euclidean")
        assert sum(1 for _ in tree.leaves()) == 2
        assert all(c.radius == 0 and c.cardinality == 1 for c in tree.leaves())
        assert {tree.root.arg_radial, tree.root.arg_pole} == {0, 1}

    def test_identical_points_are_one_leaf(self):
        tree = build(Dataset(np.ones((6, 3))), "euclidean")
        assert tree.root.is_leaf and tree.root.radius == 0 and tree.root.lfd == 0

    def test_min_radius_stops(self):
        pts = np.array([[0.0], [0.1], [0.2], [5.0]])
        tree = build(Dataset(pts), "euclidean", PartitionCriteria(min_radius=0.5))
        assert all(c.radius <= 0.5 for c in tree.leaves())

    @pytest.mark.parametrize("strategy", ["unbalanced", "balanced"])
    def test_compiled_build_matches_helpers(self, rng, strategy):
        """Center, poles and child members against the Python helpers."""
        d = Dataset(rng.integers(0, 6, (80, 2)).astype(np.float64))
        tree = build(d, "euclidean", strategy=strategy)
        metric = tree.metric
        for c in tree.clusters():
            if c.cardinality <= 100:
                assert c.center == geometric_median(d, metric, c.indices)
            if c.is_leaf:
                continue
            left, right = partition(c, d, metric, strategy)
            assert sorted(left) == sorted(c.left.indices)
            assert sorted(right) == sorted(c.right.indices)


class TestLfd:
    def test_formula(self):
        # 8 members, 2 within half the radius: log2(8 / 2)
        assert lfd(8, np.array([0, 1, 6, 6, 6, 6, 6, 10.0]), 10.0) == 2.0
        assert lfd(8, np.array([0, 6, 6, 6, 6, 6, 6, 10.0]), 10.0) == 3.0
        assert lfd(4, np.array([0, 1, 2, 3.0]), 10.0) == 0.0
        assert lfd(4, np.zeros(4), 0.0) == 0.0

    def test_half_radius_counts_as_inside(self):
        assert lfd(2, np.array([0.0, 5.0]), 10.0) == 0.0


class TestBuild:
    def test_singleton(self):
        tree = build(Dataset(np.array([[1.0, 2.0]])), "euclidean")
        assert tree.root.is_leaf and tree.root.radius == 0
        assert metric_entropy(tree) == (1, 0.0)

    def test_distinct_points_give_zero_radius_leaves(self, rng):
        d = Dataset(rng.random((200, 3)))
        tree = build(d, "euclidean")
        assert all(c.radius == 0 for c in tree.leaves())
        assert metric_entropy(tree)[0] == 200

    @pytest.mark.parametrize("m", [1, 3, 6, 9])
    def test_balanced_depth(self, rng, m):
        d = Dataset(rng.random((2**m, 4)))
        tree = build(d, "euclidean", strategy="balanced")
        assert {c.depth for c in tree.leaves()} == {m}
        check_structure(tree)

    @pytest.mark.parametrize("metric,strategy", [
        ("euclidean", "unbalanced"), ("euclidean", "balanced"), ("cosine", "unbalanced"),
        ("levenshtein", "unbalanced"), ("hamming", "unbalanced"), ("dtw", "unbalanced"),
    ])
    def test_invariants(self, rng, metric, strategy):
        if metric in ("euclidean", "cosine"):
            d = Dataset(rng.random((400, 5)))
        elif metric == "dtw":
            d = Dataset.from_series([rng.normal(size=rng.integers(2, 9)) for _ in range(150)])
        else:
            d = random_strings(300, 12, seed=3)[0]
        tree = build(d, metric, strategy=strategy, seed=9)
        check_structure(tree)
        depth_first_reorder(tree)
        check_structure(tree)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 2**31), st.integers(1, 4))
    def test_invariants_property(self, n, seed, min_card):
        rng = np.random.default_rng(seed)
        d = Dataset(rng.integers(0, 4, (n, 2)).astype(np.float64))
        tree = build(d, "euclidean", PartitionCriteria(min_cardinality=min_card), seed=seed)
        check_structure(tree)
        for leaf in tree.leaves():
            assert leaf.cardinality <= min_card or leaf.radius == 0

    def test_deterministic(self, rng, tmp_path):
        d = manifold(3000, 16, 3, seed=5)[0]
        for i in range(2):
            save_tree(build(d, "euclidean", seed=11), tmp_path / f"t{i}.tree")
        assert (tmp_path / "t0.tree").read_bytes() == (tmp_path / "t1.tree").read_bytes()

    def test_max_depth(self, rng):
        tree = build(Dataset(rng.random((500, 3))), "euclidean", PartitionCriteria(max_depth=4))
        assert tree.max_depth == 4

    def test_hamming_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            build(Dataset.from_sequences(["AC", "ACG"]), "hamming")

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            build(FIVE, "euclidean", strategy="sideways")
        with pytest.raises(ValueError):
            PartitionCriteria(min_cardinality=0)
        with pytest.raises(TypeError):
            build(np.zeros((3, 2)), "euclidean")


class TestReorder:
    def test_five_point_offsets(self):
        tree = build(FIVE, "euclidean", PartitionCriteria(max_depth=1))
        depth_first_reorder(tree)
        root = tree.root
        assert tree.original(0) == 4
        assert (root.offset, root.left.offset, root.left.cardinality) == (0, 0, 1)
        assert (root.right.offset, root.right.cardinality) == (1, 4)
        assert sorted(tree.original(p) for p in range(1, 5)) == [0, 1, 2, 3]

    def test_single_leaf_identity(self):
        tree = depth_first_reorder(build(Dataset(np.ones((4, 2))), "euclidean"))
        np.testing.assert_array_equal(tree.dataset.permutation, np.arange(4))

    def test_membership_preserved(self, rng):
        tree = build(Dataset(rng.random((300, 4))), "euclidean", seed=2)
        before = [members(tree, c) for c in tree.clusters()]
        centers = [tree.original(c.center) for c in tree.clusters()]
        depth_first_reorder(tree)
        assert [members(tree, c) for c in tree.clusters()] == before
        assert [tree.original(c.center) for c in tree.clusters()] == centers
        assert all(c.indices is None for c in tree.clusters())

    def test_twice(self):
        tree = depth_first_reorder(build(FIVE, "euclidean"))
        with pytest.raises(TreeStateError):
            depth_first_reorder(tree)


class TestReports:
    def test_five_point_entropy_matches_traversal(self):
        tree = build(FIVE, "euclidean")
        count = 0
        stack = [tree.root]
        while stack:
            c = stack.pop()
            if c.is_leaf:
                count += 1
            else:
                stack.extend(c.children)
        assert metric_entropy(tree)[0] == count == 5

    def test_lfd_report(self):
        d = manifold(5000, 32, 3, seed=1)[0]
        tree = build(d, "euclidean")
        rows = lfd_report(tree)
        assert rows[0][0] == 0 and len(set(rows[0][1:])) == 1
        assert rows[0][1] == tree.root.lfd
        for row in rows:
            assert list(row[1:]) == sorted(row[1:])

    def test_uniform_root_lfd_grows_with_n(self, rng):
        d = Dataset(rng.random((4096, 128)).astype(np.float32))
        assert build(d, "euclidean", PartitionCriteria(max_depth=0)).root.lfd > 10


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        d = Dataset(rng.random((500, 6)))
        for permute in (False, True):
            tree = build(d, "euclidean", seed=3)
            if permute:
                depth_first_reorder(tree)
            path = tmp_path / f"t{permute}.tree"
            save_tree(tree, path)
            back = load_tree(path, d)
            assert back.permuted == permute
            again = tmp_path / f"again{permute}.tree"
            save_tree(back, again)
            assert path.read_bytes() == again.read_bytes()
            check_structure(back)

    def test_permuted_file_has_no_index_lists(self, tmp_path, rng):
        d = Dataset(rng.random((300, 3)))
        plain = build(d, "euclidean")
        save_tree(plain, tmp_path / "a.tree")
        save_tree(depth_first_reorder(build(d, "euclidean")), tmp_path / "b.tree")
        header = read_tree_header(tmp_path / "b.tree")
        body = {}
        for name in ("a", "b"):
            blob = (tmp_path / f"{name}.tree").read_bytes()
            body[name] = len(blob) - blob.index(b"\n") - 1
        listed = sum(c.cardinality for c in plain.clusters())
        assert body["a"] - body["b"] == 8 * listed
        # permutation plus fixed-size records, nothing per member
        assert body["b"] == 8 * 300 + header["clusters"] * 74
        assert header["permuted"] is True

    def test_header_fields(self, tmp_path):
        save_tree(build(FIVE, "euclidean", seed=4), tmp_path / "t.tree")
        h = read_tree_header(tmp_path / "t.tree")
        assert {k: h[k] for k in ("distance", "strategy", "seed", "cardinality", "dimensionality")} == {
            "distance": "euclidean", "strategy": "unbalanced", "seed": 4,
            "cardinality": 5, "dimensionality": 1,
        }
