"""Distance functions.

Every distance is exposed as a :class:`Metric` with a scalar form and a
one-to-many form. The one-to-many form is what the tree and the searches
use; it takes a *batch* as produced by :meth:`Dataset.take` /
:meth:`Dataset.span` (a 2-D array for vector data, a :class:`Ragged` for
sequences and time series).

Floating-point distances are always accumulated in double precision.
"""

import math

import numpy as np
from numba import njit, types
from numba.extending import overload

__all__ = [
    "Metric",
    "Ragged",
    "euclidean",
    "cosine",
    "hamming",
    "levenshtein",
    "dtw",
    "get_metric",
    "METRICS",
]


class Ragged:
    """Variable-length items sharing one flat buffer.

    Item ``i`` is ``buffer[starts[i]:ends[i]]``. Selecting a subset only
    slices ``starts``/``ends``; the buffer is never copied.
    """

    __slots__ = ("buffer", "starts", "ends")

    def __init__(self, buffer, starts, ends):
        self.buffer = buffer
        self.starts = starts
        self.ends = ends

    @classmethod
    def from_items(cls, items, dtype):
        lengths = np.fromiter((len(x) for x in items), dtype=np.int64, count=len(items))
        ends = np.cumsum(lengths)
        starts = ends - lengths
        if len(items):
            buffer = np.concatenate([np.asarray(x, dtype=dtype) for x in items])
        else:
            buffer = np.empty(0, dtype=dtype)
        return cls(buffer, starts, ends)

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, i):
        return self.buffer[self.starts[i]:self.ends[i]]

    def take(self, positions):
        return Ragged(self.buffer, self.starts[positions], self.ends[positions])

    def span(self, start, stop):
        return Ragged(self.buffer, self.starts[start:stop], self.ends[start:stop])

    def lengths(self):
        return self.ends - self.starts


# --- compiled kernels -------------------------------------------------------
#
# Every distance is a jitted ``pair(a, b)`` kernel on 1-D arrays. Batches and
# the compiled search engine call the same kernels, so a distance computed
# through any path is bit-identical.

@njit(cache=True)
def _euclidean_pair(a, b):
    s = 0.0
    for i in range(len(a)):
        t = np.float64(a[i]) - np.float64(b[i])
        s += t * t
    return math.sqrt(s)


@njit(cache=True)
def _cosine_pair(a, b):
    dot = 0.0
    na = 0.0
    nb = 0.0
    for i in range(len(a)):
        x = np.float64(a[i])
        y = np.float64(b[i])
        dot += x * y
        na += x * x
        nb += y * y
    if na == 0.0 or nb == 0.0:
        return 0.0 if na == nb else 1.0
    v = 1.0 - dot / math.sqrt(na * nb)
    if v < 0.0:
        return 0.0
    if v > 2.0:
        return 2.0
    return v


@njit(cache=True)
def _hamming_pair(a, b):
    if len(a) != len(b):
        return -1.0
    c = 0
    for j in range(len(a)):
        if a[j] != b[j]:
            c += 1
    return np.float64(c)


@njit(cache=True)
def _levenshtein_bits(p, t):
    """Bit-parallel edit distance for ``len(p) <= 64`` and byte symbols in ``p``.

    Returns -1 when some symbol of ``p`` does not fit in a byte.
    """
    peq = np.zeros(256, dtype=np.uint64)
    one = np.uint64(1)
    for i in range(len(p)):
        s = int(p[i])
        if s < 0 or s > 255:
            return -1.0
        peq[s] |= one << np.uint64(i)
    high = one << np.uint64(len(p) - 1)
    pv = ~np.uint64(0)
    mv = np.uint64(0)
    score = len(p)
    for j in range(len(t)):
        c = int(t[j])
        eq = peq[c] if 0 <= c <= 255 else np.uint64(0)
        xv = eq | mv
        xh = (((eq & pv) + pv) ^ pv) | eq
        ph = mv | ~(xh | pv)
        mh = pv & xh
        if ph & high:
            score += 1
        elif mh & high:
            score -= 1
        ph = (ph << one) | one
        mh = mh << one
        pv = mh | ~(xv | ph)
        mv = ph & xv
    return np.float64(score)


@njit(cache=True)
def _levenshtein_pair(a, b):
    n, m = len(a), len(b)
    if n == 0:
        return np.float64(m)
    if m == 0:
        return np.float64(n)
    if min(n, m) <= 64:
        v = _levenshtein_bits(a, b) if n <= m else _levenshtein_bits(b, a)
        if v >= 0.0:
            return v
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            ins = cur[j - 1] + 1
            dele = prev[j] + 1
            best = sub if sub < ins else ins
            cur[j] = best if best < dele else dele
        prev, cur = cur, prev
    return np.float64(prev[m])


@njit(cache=True)
def _dtw_pair(a, b):
    n, m = len(a), len(b)
    prev = np.full(m + 1, np.inf)
    cur = np.empty(m + 1)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(ai - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


# Metric codes select a kernel inside compiled code. Passing jitted
# functions across the Python boundary instead would defeat numba's
# on-disk cache, whose keys would then embed object addresses.
EUCLIDEAN, COSINE, HAMMING, LEVENSHTEIN, DTW_CODE = range(5)

_KERNELS = (_euclidean_pair, _cosine_pair, _hamming_pair, _levenshtein_pair, _dtw_pair)


def pair_distance(code, a, b):
    """Distance between two 1-D arrays under the metric with this code."""
    return _KERNELS[code](a, b)


@overload(pair_distance)
def _pair_distance_impl(code, a, b):
    if isinstance(a.dtype, types.Complex) or isinstance(b.dtype, types.Complex):
        # only time series may be complex
        def impl(code, a, b):
            return _dtw_pair(a, b)
        return impl

    def impl(code, a, b):
        if code == EUCLIDEAN:
            return _euclidean_pair(a, b)
        if code == COSINE:
            return _cosine_pair(a, b)
        if code == HAMMING:
            return _hamming_pair(a, b)
        if code == LEVENSHTEIN:
            return _levenshtein_pair(a, b)
        return _dtw_pair(a, b)
    return impl


@njit(cache=True)
def _many_ragged(code, q, buffer, starts, ends):
    out = np.empty(len(starts), dtype=np.float64)
    for i in range(len(starts)):
        out[i] = pair_distance(code, q, buffer[starts[i]:ends[i]])
    return out


@njit(cache=True)
def _many_rows(code, q, rows):
    out = np.empty(rows.shape[0], dtype=np.float64)
    for i in range(rows.shape[0]):
        out[i] = pair_distance(code, q, rows[i])
    return out


@njit(cache=True)
def _pairwise_ragged(code, buffer, starts, ends):
    n = len(starts)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        a = buffer[starts[i]:ends[i]]
        for j in range(i + 1, n):
            v = pair_distance(code, a, buffer[starts[j]:ends[j]])
            out[i, j] = v
            out[j, i] = v
    return out


@njit(cache=True)
def _pairwise_rows(code, rows):
    n = rows.shape[0]
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            v = pair_distance(code, rows[i], rows[j])
            out[i, j] = v
            out[j, i] = v
    return out


# --- search bounds ----------------------------------------------------------
#
# Cluster pruning needs the triangle inequality. Cosine distance has none,
# but sqrt(2 * (1 - cos)) is the chord between the normalized vectors, a
# Euclidean distance (a zero vector sits at chord sqrt(2) from everything,
# like an extra orthogonal unit vector). Bounds are therefore worked out on
# that chord and mapped back, so neighbors keep their cosine distances.
#
# Every bound is widened a little: both sides of a test such as
# δ - r <= ρ carry rounding error, and without slack a point at exactly
# distance ρ can be pruned away. The slack only ever keeps extra clusters.
# The chord slack covers the square root amplifying the rounding of
# 1 - cos near zero.

SLACK = 1e-12
CHORD_SLACK = 1e-6


@njit(cache=True, nogil=True)
def to_metric(code, v):
    """Map a distance onto a scale on which the triangle inequality holds."""
    if code == COSINE:
        return math.sqrt(2.0 * v)
    return v


@njit(cache=True, nogil=True)
def from_metric(code, m):
    if code == COSINE:
        return 0.5 * m * m
    return m


@njit(cache=True, nogil=True)
def lower_bound(code, d, r):
    """Smallest possible distance to a member: widened δ⁻."""
    a = to_metric(code, d)
    b = to_metric(code, r)
    m = a - b - SLACK * (a + b)
    if code == COSINE:
        m -= CHORD_SLACK
    if m <= 0.0:
        return 0.0
    return from_metric(code, m)


@njit(cache=True, nogil=True)
def upper_bound(code, d, r):
    """Largest possible distance to a member: widened δ⁺."""
    a = to_metric(code, d)
    b = to_metric(code, r)
    m = a + b + SLACK * (a + b)
    if code == COSINE:
        m += CHORD_SLACK
    return from_metric(code, m)


@njit(cache=True, nogil=True)
def inside(code, d, r, rho):
    """Whether the whole cluster lies in the query ball (δ⁺ <= ρ)."""
    if code == COSINE:
        return upper_bound(code, d, r) <= rho
    return d + r <= rho


@njit(cache=True, nogil=True)
def keep_far_child(code, exact, d_far, d_near, pole_distance, rho):
    """Whether the child of the farther pole may hold points within ρ.

    With ``exact`` (bisector is a hyperplane) the far child is dropped when
    the query sits more than ρ past the bisector:
    ``(a + b)(a - b) > 2 f(l, r) ρ``. Otherwise the metric-only bound
    ``(a - b) / 2 > ρ`` is used.
    """
    a = to_metric(code, d_far)
    b = to_metric(code, d_near)
    f = to_metric(code, pole_distance)
    rho = to_metric(code, rho)
    fuzz = CHORD_SLACK if code == COSINE else 0.0
    if exact:
        bound = 2.0 * f * rho
        return (a + b) * (a - b) <= bound + SLACK * ((a + b) * (a + b) + bound) + 4.0 * fuzz * (a + b + f + rho)
    return a - b <= 2.0 * rho + SLACK * (a + b) + 2.0 * fuzz


# --- metric objects ---------------------------------------------------------

class Metric:
    """A named distance function backed by a jitted pair kernel.

    ``hyperplane_exact`` marks functions for which the bisector between two
    poles is a Euclidean hyperplane (after :func:`to_metric`), which lets
    the child-pruning rule use the tighter law-of-cosines bound.
    """

    name = "metric"
    is_metric = True
    kind = "vector"
    hyperplane_exact = False
    code = -1
    pair = None

    def prepare(self, x):
        raise NotImplementedError

    def _coerce(self, a, buffer):
        return a, buffer

    def distance(self, a, b):
        a, b = self._coerce(a, b)
        return self._check(type(self).pair(a, b))

    def one_to_many(self, a, batch):
        if isinstance(batch, Ragged):
            a, buffer = self._coerce(a, batch.buffer)
            out = _many_ragged(self.code, a, buffer, batch.starts, batch.ends)
        else:
            a, rows = self._coerce(a, batch)
            out = _many_rows(self.code, a, rows)
        return self._check(out)

    def pairwise(self, batch):
        if isinstance(batch, Ragged):
            out = _pairwise_ragged(self.code, batch.buffer, batch.starts, batch.ends)
        else:
            out = _pairwise_rows(self.code, batch)
        return self._check(out)

    def _check(self, out):
        return out

    def __call__(self, a, b):
        return self.distance(self.prepare(a), self.prepare(b))

    def __repr__(self):
        return f"{type(self).__name__}()"


def _as_vector(x):
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.dtype.kind not in "fiu":
        raise TypeError(f"expected a real-valued vector, got dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector contains non-finite values")
    return arr.astype(np.float64, copy=False)


class _VectorMetric(Metric):
    def prepare(self, x):
        return _as_vector(x)

    def _coerce(self, a, b):
        if b.shape[-1] != a.shape[0]:
            raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[-1]}")
        return a, b


class Euclidean(_VectorMetric):
    name = "euclidean"
    hyperplane_exact = True
    code = EUCLIDEAN
    pair = staticmethod(_euclidean_pair)


class Cosine(_VectorMetric):
    """``1 - cos(angle)``, clamped to [0, 2].

    A zero vector is at distance 1 from every nonzero vector and at
    distance 0 from another zero vector. Not a metric, but searches bound it
    through the chord distance ``sqrt(2 * d)``, which is Euclidean.
    """

    name = "cosine"
    is_metric = False
    hyperplane_exact = True
    code = COSINE
    pair = staticmethod(_cosine_pair)


def _as_symbols(x):
    if isinstance(x, str):
        codes = [ord(ch) for ch in x]
        dtype = np.uint8 if all(c < 256 for c in codes) else np.uint32
        return np.array(codes, dtype=dtype)
    if isinstance(x, (bytes, bytearray, memoryview)):
        return np.frombuffer(bytes(x), dtype=np.uint8)
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D symbol sequence, got shape {arr.shape}")
    return arr


class _SequenceMetric(Metric):
    kind = "sequence"

    def prepare(self, x):
        return _as_symbols(x)

    def _coerce(self, a, b):
        if b.dtype != a.dtype:
            common = np.promote_types(b.dtype, a.dtype)
            return a.astype(common), b.astype(common)
        return a, b


class Hamming(_SequenceMetric):
    name = "hamming"
    code = HAMMING
    pair = staticmethod(_hamming_pair)

    def _check(self, out):
        if np.any(np.asarray(out) < 0):
            raise ValueError("length mismatch: hamming needs equal-length sequences")
        return out

    def __call__(self, a, b):
        return int(super().__call__(a, b))


class Levenshtein(_SequenceMetric):
    name = "levenshtein"
    code = LEVENSHTEIN
    pair = staticmethod(_levenshtein_pair)

    def __call__(self, a, b):
        return int(super().__call__(a, b))


class DTW(_SequenceMetric):
    """Unconstrained dynamic time warping with absolute-difference steps.

    Complex samples use the modulus of the difference.
    """

    name = "dtw"
    kind = "series"
    code = DTW_CODE
    pair = staticmethod(_dtw_pair)

    def prepare(self, x):
        arr = np.asarray(x)
        if arr.ndim != 1:
            raise ValueError(f"expected a 1-D time series, got shape {arr.shape}")
        if len(arr) == 0:
            raise ValueError("empty series")
        if arr.dtype.kind == "c":
            return arr.astype(np.complex128, copy=False)
        return arr.astype(np.float64, copy=False)

    def _coerce(self, a, b):
        common = np.promote_types(np.promote_types(b.dtype, a.dtype), np.float64)
        return a.astype(common, copy=False), b.astype(common, copy=False)


euclidean = Euclidean()
cosine = Cosine()
hamming = Hamming()
levenshtein = Levenshtein()
dtw = DTW()

METRICS = {m.name: m for m in (euclidean, cosine, hamming, levenshtein, dtw)}


def get_metric(name):
    if isinstance(name, Metric):
        return name
    try:
        return METRICS[name]
    except KeyError:
        raise ValueError(
            f"unknown distance {name!r}; choose from {sorted(METRICS)}"
        ) from None
