"""Point storage, file formats and ground truth files."""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import Ragged

__all__ = [
    "Dataset",
    "GroundTruth",
    "load",
    "save",
    "apply_permutation",
    "subsample",
    "read_ground_truth",
    "write_ground_truth",
    "MAGIC",
]

MAGIC = b"CAKESBIN"
_HEADER = struct.Struct("<8sQQ")

FORMATS = ("raw-f32", "csv", "sequences")


class Dataset:
    """An ordered collection of points plus the stored-to-original mapping.

    ``points`` is a 2-D array for fixed-dimensional vectors or a
    :class:`Ragged` for variable-length sequences / series. Points are
    addressed by stored position; ``permutation[i]`` is the original index
    of the point stored at position ``i``.
    """

    def __init__(self, points, permutation=None, name="dataset"):
        if isinstance(points, Ragged):
            n = len(points)
        else:
            points = np.asarray(points)
            if points.ndim != 2:
                raise ValueError(f"vector data must be 2-D, got shape {points.shape}")
            n = points.shape[0]
        if n == 0:
            raise ValueError("zero cardinality")
        if permutation is None:
            permutation = np.arange(n, dtype=np.int64)
        else:
            permutation = np.asarray(permutation, dtype=np.int64)
            if permutation.shape != (n,):
                raise ValueError("permutation length does not match cardinality")
        self.points = points
        self.permutation = permutation
        self.name = name

    @classmethod
    def from_sequences(cls, seqs, name="sequences"):
        if not len(seqs):
            raise ValueError("zero cardinality")
        if all(isinstance(s, (bytes, bytearray)) for s in seqs):
            items = [np.frombuffer(bytes(s), dtype=np.uint8) for s in seqs]
            return cls(Ragged.from_items(items, np.uint8), name=name)
        codes = [[ord(ch) for ch in s] for s in seqs]
        dtype = np.uint8 if all(c < 256 for s in codes for c in s) else np.uint32
        return cls(Ragged.from_items(codes, dtype), name=name)

    @classmethod
    def from_series(cls, series, name="series"):
        arrays = [np.asarray(s) for s in series]
        if any(len(a) == 0 for a in arrays):
            raise ValueError("empty series")
        dtype = np.complex128 if any(a.dtype.kind == "c" for a in arrays) else np.float64
        return cls(Ragged.from_items(arrays, dtype), name=name)

    def __len__(self):
        return len(self.permutation)

    @property
    def cardinality(self):
        return len(self.permutation)

    @property
    def is_ragged(self):
        return isinstance(self.points, Ragged)

    @property
    def dimensionality(self):
        """Number of coordinates, or ``"variable"`` for ragged data."""
        if self.is_ragged:
            return "variable"
        return self.points.shape[1]

    def point(self, pos):
        return self.points[pos]

    def take(self, positions):
        return self.points.take(positions) if self.is_ragged else self.points[positions]

    def span(self, start, stop):
        if self.is_ragged:
            return self.points.span(start, stop)
        return self.points[start:stop]

    def original(self, pos):
        return int(self.permutation[pos])

    def as_text(self, pos):
        """Decode a stored sequence back to ``str``."""
        return "".join(map(chr, self.points[pos].tolist()))

    def __repr__(self):
        return (
            f"Dataset(name={self.name!r}, cardinality={len(self)}, "
            f"dimensionality={self.dimensionality!r})"
        )


def apply_permutation(d, order):
    """Physically reorder ``d`` so stored position ``i`` holds ``d[order[i]]``.

    ``order`` lists current stored positions. The returned dataset's
    permutation is composed with ``d.permutation``, so original indices stay
    recoverable.
    """
    order = np.asarray(order, dtype=np.int64)
    n = len(d)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError("order is not a bijection on [0, cardinality)")
    if d.is_ragged:
        src = d.points
        lengths = (src.ends - src.starts)[order]
        ends = np.cumsum(lengths)
        starts = ends - lengths
        gather = np.repeat(src.starts[order] - starts, lengths) + np.arange(ends[-1])
        points = Ragged(src.buffer[gather], starts, ends)
    else:
        points = d.points[order]
    return Dataset(points, d.permutation[order], name=d.name)


def subsample(d, n, seed):
    """``n`` points drawn uniformly without replacement; reproducible per seed."""
    if n < 1 or n > len(d):
        raise ValueError(f"cannot draw {n} points from a dataset of {len(d)}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(d), size=n, replace=False)
    sub = d.take(picks)
    if d.is_ragged:
        sub = _compact(sub)
    return Dataset(sub, name=f"{d.name}-sub{n}")


def _compact(r):
    lengths = r.ends - r.starts
    ends = np.cumsum(lengths)
    starts = ends - lengths
    gather = np.repeat(r.starts - starts, lengths) + np.arange(ends[-1])
    return Ragged(r.buffer[gather], starts, ends)


# --- file formats -----------------------------------------------------------

def load(path, format="raw-f32", name=None):
    """Read a dataset file; see README for the three formats."""
    path = Path(path)
    name = name or path.stem
    if format == "raw-f32":
        return _load_raw(path, name)
    if format == "csv":
        return _load_csv(path, name)
    if format == "sequences":
        return _load_sequences(path, name)
    raise ValueError(f"unknown format {format!r}; choose from {FORMATS}")


def save(d, path, format="raw-f32"):
    path = Path(path)
    if format == "raw-f32":
        if d.is_ragged:
            raise ValueError("raw-f32 needs fixed-dimensional vectors")
        pts = np.ascontiguousarray(d.points, dtype="<f4")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, pts.shape[0], pts.shape[1]))
            fh.write(pts.tobytes())
    elif format == "csv":
        if d.is_ragged:
            raise ValueError("csv needs fixed-dimensional vectors")
        with open(path, "w") as fh:
            for row in np.asarray(d.points, dtype=np.float64):
                fh.write(",".join(repr(float(v)) for v in row))
                fh.write("\n")
    elif format == "sequences":
        if not d.is_ragged:
            raise ValueError("sequences format needs sequence data")
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(d)):
                fh.write(d.as_text(i))
                fh.write("\n")
    else:
        raise ValueError(f"unknown format {format!r}; choose from {FORMATS}")


def _load_raw(path, name):
    blob = path.read_bytes()
    if len(blob) == 0:
        raise ValueError(f"{path}: zero cardinality")
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: malformed header (file shorter than {_HEADER.size} bytes)")
    magic, n, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"{path}: malformed header (bad magic {magic!r})")
    if n == 0:
        raise ValueError(f"{path}: zero cardinality")
    if dim == 0:
        raise ValueError(f"{path}: malformed header (zero dimensionality)")
    expected = n * dim * 4
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload has {len(payload)} bytes, header promises {expected}"
        )
    pts = np.frombuffer(payload, dtype="<f4").reshape(n, dim).astype(np.float32)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise ValueError(f"{path}: record {int(np.flatnonzero(bad)[0])} has non-finite values")
    return Dataset(pts, name=name)


def _load_csv(path, name):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(v) for v in line.split(",")]
            except ValueError:
                raise ValueError(f"{path}: record {lineno} is not numeric") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValueError(
                    f"{path}: record {lineno} has {len(row)} columns, expected {width}"
                )
            if not all(np.isfinite(row)):
                raise ValueError(f"{path}: record {lineno} has non-finite values")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: zero cardinality")
    return Dataset(np.array(rows, dtype=np.float64), name=name)


def _load_sequences(path, name):
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if any(line.startswith(">") for line in lines):
        seqs, cur = [], None
        for line in lines:
            if line.startswith(">"):
                if cur is not None:
                    seqs.append("".join(cur))
                cur = []
            elif cur is not None:
                cur.append(line.strip())
        if cur is not None:
            seqs.append("".join(cur))
    else:
        seqs = lines
    if not seqs:
        raise ValueError(f"{path}: zero cardinality")
    return Dataset.from_sequences(seqs, name=name)


# --- ground truth -----------------------------------------------------------

@dataclass
class GroundTruth:
    """Per-query neighbor lists of ``(original index, distance)``."""

    neighbors: list
    k: int
    distance: str = "euclidean"
    queries: list = field(default_factory=list)

    def __post_init__(self):
        if not self.queries:
            self.queries = list(range(len(self.neighbors)))


def write_ground_truth(gt, path):
    with open(path, "w") as fh:
        for q, row in zip(gt.queries, gt.neighbors):
            fh.write(json.dumps({"query": q, "neighbors": [[int(i), float(d)] for i, d in row]}))
            fh.write("\n")


def read_ground_truth(path, distance="euclidean"):
    queries, neighbors = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            queries.append(rec["query"])
            neighbors.append([(int(i), float(d)) for i, d in rec["neighbors"]])
    k = max((len(n) for n in neighbors), default=0)
    return GroundTruth(neighbors, k, distance, queries)
