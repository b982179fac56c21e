"""Compiled search over a flattened tree.

The Python implementations in :mod:`sievetree.search` are the readable
reference; this module runs the same algorithms under numba so that a
query costs microseconds per visited cluster instead of tens. Both paths
evaluate distances with the same jitted pair kernels, visit the same
clusters and report the same distance counts; the test-suite holds them
to that.

Clusters are numbered in preorder. Member ``j`` of cluster ``c`` is the
stored position ``order[offset[c] + j]``; ``order`` is the identity for a
reordered tree and the leaf order otherwise.
"""

import heapq
import math
import threading

import numpy as np
from numba import njit

from .metrics import Ragged, inside, keep_far_child, lower_bound, pair_distance, upper_bound

__all__ = ["Engine"]


# --- shared helpers ---------------------------------------------------------

@njit(cache=True, nogil=True)
def _dist(code, q, data, ws, pos):
    """Memoized query distance to a stored position; counts new evaluations."""
    buf, starts, ends = data
    memo, stamp, info = ws[0], ws[1], ws[2]
    if stamp[pos] == info[0]:
        return memo[pos]
    v = pair_distance(code, q, buf[starts[pos]:ends[pos]])
    memo[pos] = v
    stamp[pos] = info[0]
    info[1] += 1
    return v


@njit(cache=True, nogil=True)
def _members(code, q, data, offset, card, order, ws, c, delta, out_pos, out_dist, at):
    """Write the members of ``c`` and their distances at ``out[at:]``.

    Members whose distance is already memoized are not evaluated again.
    """
    off = offset[c]
    n = card[c]
    if n == 1:
        out_pos[at] = order[off]
        out_dist[at] = delta
        return at + 1
    for j in range(n):
        p = order[off + j]
        out_pos[at + j] = p
        out_dist[at + j] = _dist(code, q, data, ws, p)
    return at + n


@njit(cache=True, nogil=True)
def _tree_search(code, q, data, tree, ws, rho, prune, exact, found_c, found_d):
    """Clusters overlapping ``B(q, rho)``; returns how many were written."""
    center, radius, offset, card, lfd, left, right, pole_l, pole_r, pole_d, balanced, order = tree
    d = _dist(code, q, data, ws, center[0])
    if lower_bound(code, d, radius[0]) > rho:
        return 0
    nf = 0
    stack_c = np.empty(ws[3], dtype=np.int64)
    stack_d = np.empty(ws[3], dtype=np.float64)
    stack_c[0] = 0
    stack_d[0] = d
    top = 1
    while top > 0:
        top -= 1
        c = stack_c[top]
        d = stack_d[top]
        if left[c] < 0 or inside(code, d, radius[c], rho):
            found_c[nf] = c
            found_d[nf] = d
            nf += 1
            continue
        dl = _dist(code, q, data, ws, center[left[c]])
        dr = _dist(code, q, data, ws, center[right[c]])
        keep_left = lower_bound(code, dl, radius[left[c]]) <= rho
        keep_right = lower_bound(code, dr, radius[right[c]]) <= rho
        # the pole test can only drop a child that survived its own bound
        if prune and keep_left and keep_right and not balanced[c]:
            pl = _dist(code, q, data, ws, pole_l[c])
            pr = _dist(code, q, data, ws, pole_r[c])
            if pr <= pl:
                a, b = pl, pr
            else:
                a, b = pr, pl
            if not keep_far_child(code, exact, a, b, pole_d[c], rho):
                if pr <= pl:
                    keep_left = False
                else:
                    keep_right = False
        if keep_left:
            stack_c[top] = left[c]
            stack_d[top] = dl
            top += 1
        if keep_right:
            stack_c[top] = right[c]
            stack_d[top] = dr
            top += 1
    return nf


# --- ρ-NN -------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _rho_nn(code, q, data, tree, ws, rho, prune, exact, found_c, found_d, out_pos, out_dist):
    offset, card, order = tree[2], tree[3], tree[11]
    nf = _tree_search(code, q, data, tree, ws, rho, prune, exact, found_c, found_d)
    at = 0
    for i in range(nf):
        c = found_c[i]
        start = at
        at = _members(code, q, data, offset, card, order, ws, c, found_d[i], out_pos, out_dist, at)
        w = start
        for j in range(start, at):
            if out_dist[j] <= rho:
                out_pos[w] = out_pos[j]
                out_dist[w] = out_dist[j]
                w += 1
        at = w
    return at


# --- repeated ρ-NN ----------------------------------------------------------

@njit(cache=True, nogil=True)
def _growth_factor(lfd, card, found_c, nf, k):
    total = 0
    inv = 0.0
    for i in range(nf):
        c = found_c[i]
        total += card[c]
        if lfd[c] <= 0.0:
            return 2.0
        inv += 1.0 / lfd[c]
    mu = inv / nf
    exponent = mu * math.log(k / total)
    if exponent >= math.log(2.0):
        return 2.0
    return math.exp(exponent)


@njit(cache=True, nogil=True)
def _cover(code, q, data, tree, ws, radius, k, exact, found_c, found_d):
    """Grow the radius until the found clusters hold ``k`` points."""
    card, lfd = tree[3], tree[4]
    radii = [radius]
    nf = _tree_search(code, q, data, tree, ws, radius, True, exact, found_c, found_d)
    while True:
        total = 0
        for i in range(nf):
            total += card[found_c[i]]
        if total >= k:
            break
        if nf == 0:
            radius *= 2.0
        else:
            radius *= _growth_factor(lfd, card, found_c, nf, k)
        radii.append(radius)
        nf = _tree_search(code, q, data, tree, ws, radius, True, exact, found_c, found_d)
    return nf, np.array(radii)


@njit(cache=True, nogil=True)
def _gather(code, q, data, tree, ws, found_c, found_d, nf, out_pos, out_dist):
    """Members of the found clusters, reusing clusters gathered earlier."""
    offset, card, order = tree[2], tree[3], tree[11]
    slot_pos, slot_dist, seen = ws[4], ws[5], ws[6]
    tag = ws[2][0]
    at = 0
    for i in range(nf):
        c = found_c[i]
        off = offset[c]
        n = card[c]
        if seen[c] != tag:
            _members(code, q, data, offset, card, order, ws, c, found_d[i], slot_pos, slot_dist, off)
            seen[c] = tag
        for j in range(n):
            out_pos[at] = slot_pos[off + j]
            out_dist[at] = slot_dist[off + j]
            at += 1
    return at


# --- breadth-first sieve ----------------------------------------------------

@njit(cache=True, nogil=True)
def _tau(keys, mults, k):
    """Smallest key whose cumulative multiplicity reaches ``k`` (in place)."""
    lo = 0
    hi = len(keys)
    while True:
        n = hi - lo
        if n > 2:
            a, b, c = keys[lo], keys[lo + n // 2], keys[hi - 1]
            if a > b:
                a, b = b, a
            if b > c:
                b = c
            pivot = a if a > b else b
        else:
            pivot = keys[lo]
        # three-way partition of [lo, hi): < pivot | == pivot | > pivot
        lt = lo
        i = lo
        gt = hi
        while i < gt:
            v = keys[i]
            if v < pivot:
                keys[lt], keys[i] = keys[i], keys[lt]
                mults[lt], mults[i] = mults[i], mults[lt]
                lt += 1
                i += 1
            elif v > pivot:
                gt -= 1
                keys[gt], keys[i] = keys[i], keys[gt]
                mults[gt], mults[i] = mults[i], mults[gt]
            else:
                i += 1
        m_below = 0
        for j in range(lo, lt):
            m_below += mults[j]
        if m_below >= k:
            hi = lt
            continue
        m_at = 0
        for j in range(lt, gt):
            m_at += mults[j]
        if m_below + m_at >= k:
            return pivot
        k -= m_below + m_at
        lo = gt


@njit(cache=True, nogil=True)
def _contains(tree, rank, c, pos):
    r = pos if len(rank) == 0 else rank[pos]
    off = tree[2][c]
    return off <= r < off + tree[3][c]


@njit(cache=True, nogil=True)
def _breadth_sieve(code, q, data, tree, ws, rank, k, out_pos, out_dist):
    center, radius, offset, card = tree[0], tree[1], tree[2], tree[3]
    left, right, order = tree[5], tree[6], tree[11]
    n_points = len(ws[0])

    # point entries: out_pos/out_dist[:np_]
    d = _dist(code, q, data, ws, center[0])
    out_pos[0] = center[0]
    out_dist[0] = d
    np_ = 1

    cap = 1
    ent_c = np.empty(cap, dtype=np.int64)
    ent_d = np.empty(cap, dtype=np.float64)
    ent_s = np.empty(cap, dtype=np.int64)  # start in the inside pool
    ent_n = np.empty(cap, dtype=np.int64)  # inside count
    pool = np.empty(1, dtype=np.int64)
    ne = 0
    if card[0] > 1:
        ent_c[0] = 0
        ent_d[0] = d
        ent_s[0] = 0
        ent_n[0] = 1
        pool[0] = center[0]
        ne = 1

    leaf_pos = np.empty(n_points, dtype=np.int64)
    leaf_dist = np.empty(n_points, dtype=np.float64)

    while ne > 0:
        keys = np.empty(np_ + ne, dtype=np.float64)
        mults = np.empty(np_ + ne, dtype=np.int64)
        for i in range(np_):
            keys[i] = out_dist[i]
            mults[i] = 1
        for i in range(ne):
            keys[np_ + i] = upper_bound(code, ent_d[i], radius[ent_c[i]])
            mults[np_ + i] = card[ent_c[i]] - ent_n[i]
        tau = _tau(keys, mults, k)

        w = 0
        for i in range(np_):
            if out_dist[i] <= tau:
                out_pos[w] = out_pos[i]
                out_dist[w] = out_dist[i]
                w += 1
        np_ = w

        new_c = np.empty(2 * ne, dtype=np.int64)
        new_d = np.empty(2 * ne, dtype=np.float64)
        new_s = np.empty(2 * ne, dtype=np.int64)
        new_n = np.empty(2 * ne, dtype=np.int64)
        new_pool = np.empty(2 * (len(pool) + ne), dtype=np.int64)
        nn = 0
        used = 0
        for i in range(ne):
            c = ent_c[i]
            cd = ent_d[i]
            if lower_bound(code, cd, radius[c]) > tau:
                continue
            s = ent_s[i]
            m = ent_n[i]
            if left[c] < 0:
                got = _members(code, q, data, offset, card, order, ws, c, cd, leaf_pos, leaf_dist, 0)
                for j in range(got):
                    p = leaf_pos[j]
                    emitted = False
                    for t in range(s, s + m):
                        if pool[t] == p:
                            emitted = True
                            break
                    if not emitted:
                        out_pos[np_] = p
                        out_dist[np_] = leaf_dist[j]
                        np_ += 1
                continue
            for side in range(2):
                ch = left[c] if side == 0 else right[c]
                start = used
                has_center = False
                for t in range(s, s + m):
                    p = pool[t]
                    if _contains(tree, rank, ch, p):
                        new_pool[used] = p
                        used += 1
                        if p == center[ch]:
                            has_center = True
                dc = _dist(code, q, data, ws, center[ch])
                if not has_center:
                    out_pos[np_] = center[ch]
                    out_dist[np_] = dc
                    np_ += 1
                    new_pool[used] = center[ch]
                    used += 1
                inside = used - start
                if card[ch] > inside:
                    new_c[nn] = ch
                    new_d[nn] = dc
                    new_s[nn] = start
                    new_n[nn] = inside
                    nn += 1
                else:
                    used = start
        ent_c, ent_d, ent_s, ent_n, pool = new_c, new_d, new_s, new_n, new_pool
        ne = nn
    return np_


# --- depth-first sieve ------------------------------------------------------

@njit(cache=True, nogil=True)
def _depth_sieve(code, q, data, tree, ws, perm, k, out_orig, out_dist):
    center, radius, offset, card = tree[0], tree[1], tree[2], tree[3]
    left, right, order = tree[5], tree[6], tree[11]
    leaf_pos = ws[4]
    leaf_dist = ws[5]

    d = _dist(code, q, data, ws, center[0])
    tick = 0
    queue = [(lower_bound(code, d, radius[0]), np.int64(tick), np.int64(0), d)]
    hits = [(0.0, np.int64(0))]
    hits.pop()

    while len(queue) > 0 and (len(hits) < k or -hits[0][0] >= queue[0][0]):
        while left[queue[0][2]] >= 0:
            item = heapq.heappop(queue)
            c = item[2]
            for side in range(2):
                ch = left[c] if side == 0 else right[c]
                dc = _dist(code, q, data, ws, center[ch])
                dmin = lower_bound(code, dc, radius[ch])
                if len(hits) >= k and dmin > -hits[0][0]:
                    continue
                tick += 1
                heapq.heappush(queue, (dmin, np.int64(tick), ch, dc))
            if len(queue) == 0:
                break
        if len(queue) == 0:
            break
        item = heapq.heappop(queue)
        leaf = item[2]
        ld = item[3]
        if card[leaf] == 1:
            _push_hit(hits, k, -ld, -perm[center[leaf]])
            continue
        got = _members(code, q, data, offset, card, order, ws, leaf, ld, leaf_pos, leaf_dist, 0)
        full = len(hits) >= k
        worst = -hits[0][0] if full else 0.0
        for j in range(got):
            x = leaf_dist[j]
            if full and x > worst:
                continue
            _push_hit(hits, k, -x, -perm[leaf_pos[j]])

    nh = len(hits)
    for i in range(nh):
        out_dist[i] = -hits[i][0]
        out_orig[i] = -hits[i][1]
    return nh


@njit(cache=True, nogil=True)
def _push_hit(hits, k, negd, nego):
    entry = (negd, nego)
    if len(hits) < k:
        heapq.heappush(hits, entry)
    elif entry > hits[0]:
        heapq.heapreplace(hits, entry)


# --- Python front end -------------------------------------------------------

class _Workspace:
    """Per-query scratch. Each thread gets its own, so concurrent queries
    never share memo tables or counters."""

    def __init__(self, n, n_clusters, max_depth):
        self.memo = np.empty(n, dtype=np.float64)
        self.stamp = np.zeros(n, dtype=np.int64)
        self.info = np.zeros(2, dtype=np.int64)  # query tag, distance count
        self.stack = np.int64(max_depth + 2)
        self.slot_pos = np.empty(n, dtype=np.int64)
        self.slot_dist = np.empty(n, dtype=np.float64)
        self.seen = np.zeros(n_clusters, dtype=np.int64)
        self.found_c = np.empty(n_clusters, dtype=np.int64)
        self.found_d = np.empty(n_clusters, dtype=np.float64)
        self.out_pos = np.empty(n, dtype=np.int64)
        self.out_dist = np.empty(n, dtype=np.float64)

    def start(self):
        self.info[0] += 1
        self.info[1] = 0
        return (self.memo, self.stamp, self.info, self.stack,
                self.slot_pos, self.slot_dist, self.seen)

    @property
    def count(self):
        return int(self.info[1])


class Engine:
    """Flattened copy of a tree for compiled search."""

    def __init__(self, tree):
        clusters = list(tree.clusters())
        ids = {id(c): i for i, c in enumerate(clusters)}
        m = len(clusters)
        self.center = np.fromiter((c.center for c in clusters), np.int64, m)
        self.radius = np.fromiter((c.radius for c in clusters), np.float64, m)
        self.offset = np.fromiter((c.offset for c in clusters), np.int64, m)
        self.card = np.fromiter((c.cardinality for c in clusters), np.int64, m)
        self.lfd = np.fromiter((c.lfd for c in clusters), np.float64, m)
        self.left = np.fromiter((ids[id(c.left)] if c.left is not None else -1 for c in clusters), np.int64, m)
        self.right = np.fromiter((ids[id(c.right)] if c.right is not None else -1 for c in clusters), np.int64, m)
        self.pole_l = np.fromiter((c.arg_radial for c in clusters), np.int64, m)
        self.pole_r = np.fromiter((max(c.arg_pole, 0) for c in clusters), np.int64, m)
        self.pole_d = np.fromiter((c.pole_distance for c in clusters), np.float64, m)
        self.balanced = np.fromiter((c.balanced for c in clusters), np.bool_, m)
        n = tree.cardinality
        if tree.permuted:
            self.order = np.arange(n, dtype=np.int64)
            self.rank = np.empty(0, dtype=np.int64)
        else:
            self.rank = np.asarray(tree._rank, dtype=np.int64)
            self.order = np.empty(n, dtype=np.int64)
            self.order[self.rank] = np.arange(n)
        self.max_depth = max(c.depth for c in clusters)
        self.n_clusters = m
        self.n = n
        self.metric = tree.metric
        self.exact = tree.metric.hyperplane_exact
        self.perm = np.asarray(tree.dataset.permutation, dtype=np.int64)
        pts = tree.dataset.points
        if isinstance(pts, Ragged):
            self.buffer, self.starts, self.ends = pts.buffer, pts.starts, pts.ends
            lengths = pts.ends - pts.starts
            self.uniform_length = int(lengths[0]) if np.all(lengths == lengths[0]) else -1
        else:
            pts = np.ascontiguousarray(pts)
            dim = pts.shape[1]
            self.buffer = pts.reshape(-1)
            self.starts = np.arange(n, dtype=np.int64) * dim
            self.ends = self.starts + dim
            self.uniform_length = dim
        self._buffers = {}
        self._tree = (self.center, self.radius, self.offset, self.card, self.lfd,
                      self.left, self.right, self.pole_l, self.pole_r, self.pole_d,
                      self.balanced, self.order)
        self._local = threading.local()

    def workspace(self):
        return _Workspace(self.n, self.n_clusters, self.max_depth)

    def _prepare(self, q):
        metric = self.metric
        q = metric.prepare(q)
        if metric.kind == "vector":
            if len(q) != self.uniform_length:
                raise ValueError(f"dimension mismatch: {len(q)} vs {self.uniform_length}")
            return q, (self.buffer, self.starts, self.ends)
        if metric.name == "hamming" and len(q) != self.uniform_length:
            raise ValueError("length mismatch: hamming needs equal-length sequences")
        q, probe = metric._coerce(q, self.buffer[:1])
        if probe.dtype != self.buffer.dtype:
            key = probe.dtype.str
            if key not in self._buffers:
                self._buffers[key] = self.buffer.astype(probe.dtype)
            buf = self._buffers[key]
        else:
            buf = self.buffer
        return q, (buf, self.starts, self.ends)

    def _ws(self, ws):
        if ws is None:
            ws = getattr(self._local, "ws", None)
            if ws is None:
                ws = self._local.ws = self.workspace()
        return ws

    def rho_nn(self, q, rho, prune=True, ws=None):
        """Stored positions and distances within ``rho``; plus the count."""
        ws = self._ws(ws)
        q, data = self._prepare(q)
        w = ws.start()
        n = _rho_nn(self.metric.code, q, data, self._tree, w, float(rho), prune,
                    self.exact, ws.found_c, ws.found_d, ws.out_pos, ws.out_dist)
        return ws.out_pos[:n].copy(), ws.out_dist[:n].copy(), ws.count

    def tree_search(self, q, rho, prune=True, ws=None):
        """Preorder ids of the clusters overlapping the ball, plus their δ."""
        ws = self._ws(ws)
        q, data = self._prepare(q)
        w = ws.start()
        nf = _tree_search(self.metric.code, q, data, self._tree, w, float(rho),
                          prune, self.exact, ws.found_c, ws.found_d)
        return ws.found_c[:nf].copy(), ws.found_d[:nf].copy(), ws.count

    def repeated_rnn(self, q, k, select, ws=None):
        """Returns (neighbors, count, radii); ``select`` maps positions to a
        neighbor list of the ``k`` best."""
        ws = self._ws(ws)
        q, data = self._prepare(q)
        code = self.metric.code
        w = ws.start()
        if self.radius[0] == 0.0:
            d = _dist(code, q, data, w, self.center[0])
            pos = self.order
            return select(pos, np.full(len(pos), d), k), ws.count, []
        radius = self.radius[0] / self.card[0]
        nf, radii = _cover(code, q, data, self._tree, w, radius, k, self.exact,
                           ws.found_c, ws.found_d)
        radius = radii[-1]
        radii = radii.tolist()
        at = _gather(code, q, data, self._tree, w, ws.found_c, ws.found_d, nf, ws.out_pos, ws.out_dist)
        neighbors = select(ws.out_pos[:at], ws.out_dist[:at], k)
        kth = neighbors[-1][1]
        if kth > radius:
            radii.append(kth)
            nf = _tree_search(code, q, data, self._tree, w, kth, True, self.exact,
                              ws.found_c, ws.found_d)
            at = _gather(code, q, data, self._tree, w, ws.found_c, ws.found_d, nf, ws.out_pos, ws.out_dist)
            neighbors = select(ws.out_pos[:at], ws.out_dist[:at], k)
        return neighbors, ws.count, radii

    def breadth_sieve(self, q, k, ws=None):
        """Candidate stored positions and distances (at least ``k``)."""
        ws = self._ws(ws)
        q, data = self._prepare(q)
        w = ws.start()
        n = _breadth_sieve(self.metric.code, q, data, self._tree, w, self.rank, k,
                           ws.out_pos, ws.out_dist)
        return ws.out_pos[:n].copy(), ws.out_dist[:n].copy(), ws.count

    def depth_sieve(self, q, k, ws=None):
        """The ``k`` hits as original indices and distances, unordered."""
        ws = self._ws(ws)
        q, data = self._prepare(q)
        w = ws.start()
        n = _depth_sieve(self.metric.code, q, data, self._tree, w, self.perm, k,
                         ws.out_pos, ws.out_dist)
        return ws.out_pos[:n].copy(), ws.out_dist[:n].copy(), ws.count
