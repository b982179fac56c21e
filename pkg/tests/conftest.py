"""Independent oracles shared by the test modules.

Nothing here calls into the package's distance kernels: the oracles are
written from the definitions so that they can catch kernel bugs.
"""

import math

import numpy as np
import pytest


def euclid_oracle(a, b):
    return math.dist([float(x) for x in a], [float(y) for y in b])


def hamming_oracle(a, b):
    assert len(a) == len(b)
    return sum(1 for x, y in zip(a, b) if x != y)


def levenshtein_oracle(a, b):
    """Full (n+1) x (m+1) dynamic-programming table."""
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = i
    for j in range(m + 1):
        table[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            table[i][j] = min(
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
                table[i - 1][j - 1] + (a[i - 1] != b[j - 1]),
            )
    return table[n][m]


def dtw_oracle(a, b):
    """Full cost table with absolute-difference steps."""
    n, m = len(a), len(b)
    inf = float("inf")
    cost = [[inf] * (m + 1) for _ in range(n + 1)]
    cost[0][0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            step = abs(complex(a[i - 1]) - complex(b[j - 1]))
            cost[i][j] = step + min(cost[i - 1][j], cost[i][j - 1], cost[i - 1][j - 1])
    return cost[n][m]


def brute_knn(points, q, k, dist):
    """k nearest as (index, distance), ties by smaller index."""
    scored = sorted((dist(q, p), i) for i, p in enumerate(points))
    return [(i, d) for d, i in scored[:k]]


def brute_rnn(points, q, rho, dist):
    return sorted((i, dist(q, p)) for i, p in enumerate(points) if dist(q, p) <= rho)


def random_strings(rng, n, length, alphabet="ACGT"):
    return ["".join(rng.choice(list(alphabet), length)) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
