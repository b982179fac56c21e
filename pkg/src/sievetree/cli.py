"""Command-line interface.

Exit codes: 0 on success, 2 for usage or input errors, 1 for anything
unexpected. Errors are reported as one line on standard error.
"""

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentSpec, augment, write_sources
from .dataset import FORMATS, Dataset, GroundTruth, load, read_ground_truth, save, write_ground_truth
from .generate import manifold, random_strings, uniform_hypercube
from .metrics import METRICS, get_metric
from .search import KNN_ALGORITHMS, TREE_ALGORITHMS, knn, linear_knn, linear_rnn, rho_nn
from .tree import (
    STRATEGIES,
    PartitionCriteria,
    build,
    depth_first_reorder,
    lfd_report,
    load_tree,
    metric_entropy,
    read_tree_header,
    save_tree,
)
from .tuning import auto_tune

__all__ = ["main", "recall", "BENCH_COLUMNS", "LFD_COLUMNS"]

BENCH_COLUMNS = (
    "dataset", "distance", "strategy", "permuted", "algorithm", "k",
    "cardinality", "throughput_qps", "recall", "mean_distance_count",
)
LFD_COLUMNS = ("depth", "min", "p5", "p25", "p50", "p75", "p95", "max")


class InputError(Exception):
    """Bad input from the user; exits with status 2."""


def recall(returned, truth, k):
    """Fraction of the ``k`` true neighbors found, forgiving distance ties.

    A returned neighbor counts if it is in the true list or if its distance
    is no larger than the k-th true distance.
    """
    if k < 1:
        raise ValueError("k must be positive")
    truth = truth[:k]
    if not truth:
        return 1.0
    kth = truth[-1][1]
    ids = {i for i, _ in truth}
    hits = sum(1 for i, d in returned[:k] if i in ids or d <= kth)
    return min(hits, len(truth)) / len(truth)


# --- helpers ----------------------------------------------------------------

def _metric_for(args, default="euclidean"):
    return get_metric(args.distance or default)


def _format_for(args, metric):
    if args.format:
        return args.format
    return "raw-f32" if metric.kind == "vector" else "sequences"


def _load_data(path, args, metric):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    return load(path, _format_for(args, metric))


def _load_queries(path, args, metric):
    d = _load_data(path, args, metric)
    return [d.point(i) for i in range(len(d))]


def _load_tree(args):
    path = Path(args.tree)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    header = read_tree_header(path)
    if args.distance and args.distance != header["distance"]:
        raise InputError(
            f"tree was built with {header['distance']!r}, not {args.distance!r}"
        )
    metric = get_metric(header["distance"])
    data = _load_data(args.data, args, metric)
    return load_tree(path, data)


def _check_k(k, n):
    if k < 1 or k > n:
        raise InputError(f"k must be in [1, {n}], got {k}")


def _run_queries(fn, queries, workers):
    """Apply ``fn`` to every query; results stay attached to their index."""
    if workers <= 1:
        return [fn(q) for q in queries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, queries))


def _emit(lines, out):
    if out:
        with open(out, "w") as fh:
            for line in lines:
                fh.write(line + "\n")
    else:
        for line in lines:
            sys.stdout.write(line + "\n")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(text):
    return [v for v in text.split(",") if v]


# --- subcommands ------------------------------------------------------------

def cmd_gen(args):
    if args.kind == "strings":
        data, queries = random_strings(args.n, args.length, args.seed, args.queries)
        fmt = args.format or "sequences"
        save(data, args.out, fmt)
        if args.queries_out:
            save(Dataset.from_sequences(queries), args.queries_out, fmt)
        return 0
    if args.kind == "uniform-hypercube":
        data, queries = uniform_hypercube(args.n, args.dim, args.seed, args.queries)
    else:
        if args.intrinsic_dim > args.dim:
            raise InputError(
                f"intrinsic dimension {args.intrinsic_dim} exceeds dimension {args.dim}"
            )
        data, queries = manifold(args.n, args.dim, args.intrinsic_dim, args.seed, args.queries)
    fmt = args.format or "raw-f32"
    save(data, args.out, fmt)
    if args.queries_out and len(queries):
        save(Dataset(queries), args.queries_out, fmt)
    return 0


def cmd_augment(args):
    metric = _metric_for(args)
    d = _load_data(args.data, args, metric)
    spec = AugmentSpec(args.multiplier, args.epsilon, args.seed)
    out = augment(d, spec)
    save(out, args.out, _format_for(args, metric))
    sources = args.sources or f"{args.out}.sources.json"
    write_sources(sources, len(d), spec)
    return 0


def cmd_build(args):
    metric = _metric_for(args)
    d = _load_data(args.data, args, metric)
    criteria = PartitionCriteria(args.min_cardinality, args.min_radius, args.max_depth)
    t0 = time.perf_counter()
    tree = build(d, metric, criteria, args.strategy, args.seed)
    if args.permute:
        depth_first_reorder(tree)
    elapsed = time.perf_counter() - t0
    save_tree(tree, args.out)
    leaves, mean_radius = metric_entropy(tree)
    print(f"leaves: {leaves}")
    print(f"mean leaf radius: {mean_radius:.6g}")
    print(f"max depth: {tree.max_depth}")
    print(f"build seconds: {elapsed:.3f}")
    return 0


def cmd_search(args):
    tree = _load_tree(args)
    queries = _load_queries(args.queries, args, tree.metric)
    if (args.k is None) == (args.radius is None):
        raise InputError("give exactly one of --k and --radius")
    if args.radius is not None:
        if args.radius < 0:
            raise InputError("radius must be non-negative")

        def one(q):
            if args.algo == "linear":
                return linear_rnn(tree, q, args.radius)
            return rho_nn(tree, q, args.radius, prune=not args.no_prune)

        reports = _run_queries(one, queries, args.workers)
        key, value = "radius", args.radius
    else:
        _check_k(args.k, tree.cardinality)
        algo = args.algo
        if algo == "auto":
            tuning = auto_tune(tree, args.k)
            algo = tuning.chosen
            print(f"auto-tuned algorithm: {algo}", file=sys.stderr)
        reports = _run_queries(lambda q: knn(tree, q, args.k, algo), queries, args.workers)
        key, value = "k", args.k
    lines = []
    for i, rep in enumerate(reports):
        rec = rep.to_json(i, key, value)
        if args.omit_timing:
            del rec["elapsed_us"]
        lines.append(json.dumps(rec))
    _emit(lines, args.out)
    return 0


def cmd_ground_truth(args):
    metric = _metric_for(args)
    d = _load_data(args.data, args, metric)
    queries = _load_queries(args.queries, args, metric)
    _check_k(args.k, len(d))
    reports = _run_queries(lambda q: linear_knn(d, q, args.k, metric), queries, args.workers)
    gt = GroundTruth([r.neighbors for r in reports], args.k, metric.name)
    write_ground_truth(gt, args.out)
    return 0


def cmd_bench(args):
    metric = _metric_for(args)
    base = _load_data(args.data, args, metric)
    queries = _load_queries(args.queries, args, metric)
    algos = args.algos
    for a in algos:
        if a not in KNN_ALGORITHMS:
            raise InputError(f"unknown algorithm {a!r}; choose from {sorted(KNN_ALGORITHMS)}")
    truth_file = read_ground_truth(args.ground_truth) if args.ground_truth else None
    rows = []
    lfd_rows = []
    for m in args.multipliers:
        d = base if m == 1 else augment(base, AugmentSpec(m, args.epsilon, args.seed))
        n = len(d)
        criteria = PartitionCriteria(args.min_cardinality, args.min_radius, args.max_depth)
        tree = build(d, metric, criteria, args.strategy, args.seed)
        if args.permute:
            depth_first_reorder(tree)
        for r in lfd_report(tree):
            lfd_rows.append((n, *r))
        for k in args.k:
            _check_k(k, n)
            if truth_file is not None and m == 1:
                truth = [row[:k] for row in truth_file.neighbors]
            else:
                truth = [linear_knn(d, q, k, metric).neighbors for q in queries]
            for a in algos:
                knn(tree, queries[0], k, a)  # warmup: compiled code loads lazily
                t0 = time.perf_counter()
                reports = _run_queries(lambda q: knn(tree, q, k, a), queries, args.workers)
                wall = time.perf_counter() - t0
                rec = float(np.mean([recall(r.neighbors, t, k) for r, t in zip(reports, truth)]))
                count = ""
                if args.count_distances:
                    count = f"{np.mean([r.distance_count for r in reports]):.2f}"
                rows.append((
                    base.name, metric.name, args.strategy, args.permute, a, k, n,
                    f"{len(queries) / max(wall, 1e-12):.3f}", f"{rec:.6f}", count,
                ))
    _write_csv(args.out, BENCH_COLUMNS, rows)
    if args.lfd_out:
        _write_csv(args.lfd_out, ("cardinality",) + LFD_COLUMNS, lfd_rows)
    return 0


def cmd_lfd_report(args):
    tree = _load_tree(args)
    _write_csv(args.out, LFD_COLUMNS, lfd_report(tree))
    return 0


def _write_csv(path, header, rows):
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
    finally:
        if path:
            fh.close()


# --- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors as one line on stderr, exit status 2."""

    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message.splitlines()[0]} (see --help)\n")


def _globals(top):
    # Global flags are accepted before or after the subcommand. Only the
    # top-level parser sets defaults, so a flag given before the
    # subcommand is not overwritten by the subcommand's own default.
    g = _Parser(add_help=False)
    kw = {} if top else {"default": argparse.SUPPRESS}
    g.add_argument("--seed", type=int, help="random seed (default 0)", **(kw or {"default": 0}))
    g.add_argument("--distance", choices=sorted(METRICS), help="distance function", **kw)
    g.add_argument("--format", choices=FORMATS,
                   help="file format (default raw-f32 for vectors, sequences otherwise)", **kw)
    return g


def _parser():
    common = _globals(top=False)

    crit = _Parser(add_help=False)
    crit.add_argument("--strategy", choices=STRATEGIES, default="unbalanced")
    crit.add_argument("--min-cardinality", type=int, default=1,
                      help="largest cluster that stays a leaf")
    crit.add_argument("--min-radius", type=float, default=0.0)
    crit.add_argument("--max-depth", type=int, default=None)
    crit.add_argument("--permute", action="store_true",
                      help="reorder the data depth-first after building")

    p = _Parser(prog="sievetree", parents=[_globals(top=True)],
                                description="Exact similarity search over divisive cluster trees.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--kind", choices=("uniform-hypercube", "manifold", "strings"), required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--intrinsic-dim", type=int, default=4)
    g.add_argument("--length", type=int, default=32, help="string length for --kind strings")
    g.add_argument("--queries", type=int, default=0, help="extra points to write as queries")
    g.add_argument("--queries-out")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    a = sub.add_parser("augment", parents=[common], help="grow a dataset by jittered copies")
    a.add_argument("--data", required=True)
    a.add_argument("--multiplier", type=int, required=True)
    a.add_argument("--epsilon", type=float, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--sources", help="sidecar JSON of source indices (default OUT.sources.json)")
    a.set_defaults(fn=cmd_augment)

    b = sub.add_parser("build", parents=[common, crit], help="build and save a tree")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_build)

    s = sub.add_parser("search", parents=[common], help="search a saved tree")
    s.add_argument("--tree", required=True)
    s.add_argument("--data", required=True, help="the dataset the tree was built on")
    s.add_argument("--queries", required=True)
    s.add_argument("--algo", choices=sorted(KNN_ALGORITHMS) + ["auto"], default="depth-sieve")
    s.add_argument("--k", type=int)
    s.add_argument("--radius", type=float)
    s.add_argument("--no-prune", action="store_true", help="disable child pruning for --radius")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--omit-timing", action="store_true", help="drop elapsed_us from the output")
    s.add_argument("--out", help="output file (default stdout)")
    s.set_defaults(fn=cmd_search)

    t = sub.add_parser("ground-truth", parents=[common], help="exact k-NN by linear scan")
    t.add_argument("--data", required=True)
    t.add_argument("--queries", required=True)
    t.add_argument("--k", type=int, required=True)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_ground_truth)

    bench = sub.add_parser(
        "bench", parents=[common, crit], help="throughput and recall table",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            "bench CSV columns: " + ",".join(BENCH_COLUMNS) + "\n"
            "lfd CSV columns: cardinality," + ",".join(LFD_COLUMNS) + "\n"
            "mean_distance_count is empty unless --count-distances is given."
        ),
    )
    bench.add_argument("--data", required=True)
    bench.add_argument("--queries", required=True)
    bench.add_argument("--k", type=_int_list, default=[10], help="comma-separated k values")
    bench.add_argument("--algos", type=_name_list,
                       default=["linear", *TREE_ALGORITHMS], help="comma-separated algorithms")
    bench.add_argument("--multipliers", type=_int_list, default=[1],
                       help="augmentation multipliers, e.g. 1,2,4")
    bench.add_argument("--epsilon", type=float, default=0.01)
    bench.add_argument("--ground-truth", help="ground truth for the unaugmented data")
    bench.add_argument("--count-distances", action="store_true")
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("--out", help="bench CSV (default stdout)")
    bench.add_argument("--lfd-out", help="per-depth LFD percentile CSV")
    bench.set_defaults(fn=cmd_bench)

    r = sub.add_parser("lfd-report", parents=[common], help="per-depth LFD percentiles")
    r.add_argument("--tree", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", help="CSV file (default stdout)")
    r.set_defaults(fn=cmd_lfd_report)
    return p


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InputError, ValueError, TypeError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"sievetree {args.command}: error: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"sievetree {args.command}: internal error: {type(exc).__name__}: {exc}".splitlines()[0],
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
