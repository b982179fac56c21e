import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sievetree import cli
from sievetree.cli import BENCH_COLUMNS, LFD_COLUMNS, recall
from sievetree.dataset import load, read_ground_truth
from sievetree.tree import build, load_tree, metric_entropy

FIVE_CSV = Path(__file__).parent / "data" / "five_points.csv"


def main(argv):
    return cli.main([str(a) for a in argv])


def run(*argv):
    """Run the CLI in a fresh interpreter; returns (code, stdout, stderr)."""
    proc = subprocess.run([sys.executable, "-m", "sievetree", *map(str, argv)],
                          capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


def lines(path):
    return [json.loads(x) for x in Path(path).read_text().splitlines()]


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    """A 2,000-point manifold with 20 held-out queries."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--kind", "manifold", "--n", "2000", "--dim", "12",
                 "--intrinsic-dim", "3", "--seed", "4", "--queries", "20",
                 "--queries-out", root / "q.bin", "--out", root / "d.bin"]) == 0
    assert main(["build", "--data", root / "d.bin", "--out", root / "t.tree", "--permute"]) == 0
    return root


class TestRecall:
    def test_self(self):
        truth = [(3, 0.1), (1, 0.2), (4, 0.5)]
        assert recall(truth, truth, 3) == 1.0

    def test_empty(self):
        assert recall([], [(3, 0.1), (1, 0.2)], 2) == 0.0

    def test_tie_forgiven(self):
        truth = [(0, 1.0), (1, 2.0)]
        assert recall([(0, 1.0), (5, 2.0)], truth, 2) == 1.0
        assert recall([(5, 2.0), (6, 2.0)], truth, 2) == 1.0

    def test_beyond_kth_not_forgiven(self):
        truth = [(0, 1.0), (1, 2.0)]
        assert recall([(0, 1.0), (5, 2.5)], truth, 2) == 0.5

    def test_only_first_k_count(self):
        assert recall([(9, 5.0), (0, 1.0)], [(0, 1.0)], 1) == 0.0


class TestGen:
    @pytest.mark.parametrize("kind", ["uniform-hypercube", "manifold", "strings"])
    def test_same_seed_same_bytes(self, tmp_path, kind):
        for name in ("a", "b"):
            assert main(["gen", "--kind", kind, "--n", "300", "--dim", "8", "--length", "12",
                         "--seed", "9", "--out", tmp_path / name]) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_uniform_range(self, tmp_path):
        main(["gen", "--kind", "uniform-hypercube", "--n", "500", "--dim", "4", "--out", tmp_path / "u"])
        pts = load(tmp_path / "u").points
        assert pts.shape == (500, 4) and pts.min() >= 0 and pts.max() < 1

    def test_intrinsic_too_large(self, capsys):
        code = main(["gen", "--kind", "manifold", "--n", "10", "--dim", "3",
                     "--intrinsic-dim", "4", "--out", "/tmp/never"])
        assert code == 2
        assert "intrinsic" in capsys.readouterr().err


class TestBuild:
    def test_five_point_csv(self, tmp_path, capsys):
        assert main(["--format", "csv", "build", "--data", FIVE_CSV, "--out", tmp_path / "t"]) == 0
        out = capsys.readouterr().out
        tree = load_tree(tmp_path / "t", load(FIVE_CSV, "csv"))
        count = 0
        stack = [tree.root]
        while stack:
            c = stack.pop()
            count += c.is_leaf
            stack.extend(c.children or ())
        assert f"leaves: {count}" in out and count == 5
        assert "max depth:" in out and "build seconds:" in out

    @pytest.mark.parametrize("m", [3, 7])
    def test_balanced_depth(self, tmp_path, capsys, m):
        main(["gen", "--kind", "uniform-hypercube", "--n", 2**m, "--dim", "3", "--out", tmp_path / "d"])
        assert main(["build", "--data", tmp_path / "d", "--out", tmp_path / "t",
                     "--strategy", "balanced"]) == 0
        assert f"max depth: {m}\n" in capsys.readouterr().out

    def test_same_as_library(self, tmp_path, small):
        tree = load_tree(small / "t.tree", load(small / "d.bin"))
        lib = build(load(small / "d.bin"), "euclidean")
        assert metric_entropy(tree) == metric_entropy(lib)


class TestErrors:
    def test_missing_file(self, tmp_path):
        code, _, err = run("build", "--data", tmp_path / "none.bin", "--out", tmp_path / "t")
        assert code == 2
        assert len(err.strip().splitlines()) == 1 and "no such file" in err

    def test_unknown_distance(self):
        code, _, err = run("--distance", "manhattan", "build", "--data", "x", "--out", "y")
        assert code == 2 and len(err.strip().splitlines()) == 1

    def test_missing_subcommand(self):
        code, _, err = run()
        assert code == 2 and len(err.strip().splitlines()) == 1

    def test_bad_file_names_record(self, tmp_path, capsys):
        (tmp_path / "bad.csv").write_text("1,2\n3\n")
        assert main(["--format", "csv", "build", "--data", tmp_path / "bad.csv", "--out", tmp_path / "t"]) == 2
        err = capsys.readouterr().err
        assert "record 2" in err and len(err.strip().splitlines()) == 1

    def test_k_too_large(self, small, capsys):
        code = main(["search", "--tree", small / "t.tree", "--data", small / "d.bin",
                     "--queries", small / "q.bin", "--k", "2001"])
        assert code == 2 and "k must be" in capsys.readouterr().err

    def test_k_and_radius_exclusive(self, small, capsys):
        code = main(["search", "--tree", small / "t.tree", "--data", small / "d.bin",
                     "--queries", small / "q.bin", "--k", "3", "--radius", "1"])
        assert code == 2

    def test_distance_mismatch(self, small, capsys):
        code = main(["--distance", "cosine", "search", "--tree", small / "t.tree",
                     "--data", small / "d.bin", "--queries", small / "q.bin", "--k", "3"])
        assert code == 2 and "built with" in capsys.readouterr().err


class TestSearch:
    def _search(self, small, *extra, out="r.jsonl"):
        assert main(["search", "--tree", small / "t.tree", "--data", small / "d.bin",
                     "--queries", small / "q.bin", "--out", small / out, *extra]) == 0
        return lines(small / out)

    def test_wire_format(self, small):
        recs = self._search(small, "--k", "5")
        assert len(recs) == 20
        assert set(recs[0]) == {"query", "algo", "k", "neighbors", "distance_count", "elapsed_us"}
        assert [r["query"] for r in recs] == list(range(20))
        assert all(len(r["neighbors"]) == 5 for r in recs)

    def test_linear_equals_depth_sieve(self, small):
        a = self._search(small, "--k", "10", "--algo", "linear", out="lin.jsonl")
        b = self._search(small, "--k", "10", "--algo", "depth-sieve", out="dfs.jsonl")
        assert [r["neighbors"] for r in a] == [r["neighbors"] for r in b]

    def test_radius_zero_returns_self(self, small):
        assert main(["search", "--tree", small / "t.tree", "--data", small / "d.bin",
                     "--queries", small / "d.bin", "--radius", "0", "--out", small / "self.jsonl"]) == 0
        recs = lines(small / "self.jsonl")
        assert len(recs) == 2000
        assert all(r["neighbors"] == [[r["query"], 0.0]] for r in recs)

    def test_no_prune_same_hits(self, small):
        a = self._search(small, "--radius", "0.2", out="p.jsonl")
        b = self._search(small, "--radius", "0.2", "--no-prune", out="np.jsonl")
        assert [r["neighbors"] for r in a] == [r["neighbors"] for r in b]
        assert sum(r["distance_count"] for r in a) <= sum(r["distance_count"] for r in b)

    def test_auto_reports_choice(self, small, capsys):
        self._search(small, "--k", "3", "--algo", "auto", out="auto.jsonl")
        err = capsys.readouterr().err
        chosen = err.split("auto-tuned algorithm: ")[1].strip()
        assert chosen in ("repeated-rnn", "breadth-sieve", "depth-sieve")

    def test_workers_match_sequential(self, small):
        a = self._search(small, "--k", "7", "--omit-timing", out="w1.jsonl")
        b = self._search(small, "--k", "7", "--omit-timing", "--workers", "4", out="w4.jsonl")
        assert a == b
        assert (small / "w1.jsonl").read_bytes() == (small / "w4.jsonl").read_bytes()

    def test_strings(self, tmp_path):
        main(["gen", "--kind", "strings", "--n", "400", "--length", "10", "--queries", "5",
              "--queries-out", tmp_path / "q.txt", "--out", tmp_path / "s.txt"])
        main(["--distance", "levenshtein", "build", "--data", tmp_path / "s.txt", "--out", tmp_path / "t"])
        for algo in ("linear", "breadth-sieve"):
            assert main(["--distance", "levenshtein", "search", "--tree", tmp_path / "t",
                         "--data", tmp_path / "s.txt", "--queries", tmp_path / "q.txt",
                         "--k", "4", "--algo", algo, "--out", tmp_path / f"{algo}.jsonl"]) == 0
        a, b = lines(tmp_path / "linear.jsonl"), lines(tmp_path / "breadth-sieve.jsonl")
        assert [r["neighbors"] for r in a] == [r["neighbors"] for r in b]


class TestGroundTruth:
    def test_recall_against_itself(self, small):
        assert main(["ground-truth", "--data", small / "d.bin", "--queries", small / "q.bin",
                     "--k", "10", "--out", small / "gt.jsonl"]) == 0
        gt = read_ground_truth(small / "gt.jsonl")
        assert gt.k == 10 and len(gt.neighbors) == 20
        for row in gt.neighbors:
            assert [d for _, d in row] == sorted(d for _, d in row)
            assert recall(row, row, 10) == 1.0

    def test_search_has_full_recall(self, small):
        main(["ground-truth", "--data", small / "d.bin", "--queries", small / "q.bin",
              "--k", "10", "--out", small / "gt2.jsonl"])
        main(["search", "--tree", small / "t.tree", "--data", small / "d.bin", "--queries",
              small / "q.bin", "--k", "10", "--algo", "repeated-rnn", "--out", small / "rr.jsonl"])
        gt = read_ground_truth(small / "gt2.jsonl").neighbors
        got = [[tuple(x) for x in r["neighbors"]] for r in lines(small / "rr.jsonl")]
        assert all(recall(g, t, 10) == 1.0 for g, t in zip(got, gt))


class TestBench:
    def test_sweep_rows(self, small):
        assert main(["--seed", "3", "bench", "--data", small / "d.bin", "--queries", small / "q.bin",
                     "--k", "5", "--multipliers", "1,2,4", "--count-distances", "--permute",
                     "--out", small / "bench.csv", "--lfd-out", small / "lfd.csv"]) == 0
        with open(small / "bench.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == BENCH_COLUMNS
        algos = {r["algorithm"] for r in rows}
        for a in algos:
            mine = [r for r in rows if r["algorithm"] == a]
            assert [int(r["cardinality"]) for r in mine] == [2000, 4000, 8000]
        for r in rows:
            assert 0.0 <= float(r["recall"]) <= 1.0 and float(r["throughput_qps"]) > 0
            if r["algorithm"] != "linear":
                assert float(r["recall"]) == 1.0
            else:
                assert float(r["mean_distance_count"]) == int(r["cardinality"])
        with open(small / "lfd.csv") as fh:
            lfd_rows = list(csv.DictReader(fh))
        assert tuple(lfd_rows[0]) == ("cardinality",) + LFD_COLUMNS
        assert {int(r["cardinality"]) for r in lfd_rows} == {2000, 4000, 8000}

    def test_unknown_algorithm(self, small):
        assert main(["bench", "--data", small / "d.bin", "--queries", small / "q.bin",
                     "--algos", "linear,quantum"]) == 2


class TestLfdReport:
    def test_percentiles(self, small, capsys):
        assert main(["lfd-report", "--tree", small / "t.tree", "--data", small / "d.bin"]) == 0
        rows = list(csv.reader(capsys.readouterr().out.splitlines()))
        assert tuple(rows[0]) == LFD_COLUMNS
        for row in rows[1:]:
            vals = [float(v) for v in row[1:]]
            assert vals == sorted(vals)


class TestAugment:
    def test_sidecar(self, small):
        assert main(["--seed", "2", "augment", "--data", small / "d.bin", "--multiplier", "3",
                     "--epsilon", "0.01", "--out", small / "aug.bin"]) == 0
        aug = load(small / "aug.bin").points
        base = load(small / "d.bin").points
        side = json.loads((small / "aug.bin.sources.json").read_text())
        src = np.asarray(side["sources"])
        assert aug.shape[0] == 6000 and len(src) == 6000
        gaps = np.linalg.norm(aug.astype(np.float64) - base.astype(np.float64)[src], axis=1)
        assert gaps.max() <= 0.01

    def test_strings_rejected(self, tmp_path, capsys):
        (tmp_path / "s.txt").write_text("ACGT\nGGCC\n")
        assert main(["--format", "sequences", "augment", "--data", tmp_path / "s.txt",
                     "--multiplier", "2", "--epsilon", "0.1", "--out", tmp_path / "o"]) == 2


class TestDeterminism:
    def test_identical_invocations(self, small):
        for name in ("x", "y"):
            main(["search", "--tree", small / "t.tree", "--data", small / "d.bin", "--queries",
                  small / "q.bin", "--k", "10", "--algo", "breadth-sieve", "--omit-timing",
                  "--out", small / f"{name}.jsonl"])
        assert (small / "x.jsonl").read_bytes() == (small / "y.jsonl").read_bytes()
