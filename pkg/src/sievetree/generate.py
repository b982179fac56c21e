"""Synthetic datasets with a known intrinsic dimension."""

import numpy as np

from .dataset import Dataset

__all__ = ["uniform_hypercube", "manifold", "random_strings", "KINDS"]

KINDS = ("uniform-hypercube", "manifold", "strings")


def uniform_hypercube(n, d, seed=0, queries=0):
    """I.i.d. uniform points in [0, 1]^d as float32.

    Returns ``(data, queries)``; the queries come from the same stream
    after the data.
    """
    _check_sizes(n, d)
    rng = np.random.default_rng(seed)
    pts = rng.random((n + queries, d), dtype=np.float32)
    return Dataset(pts[:n], name=f"uniform-{n}x{d}"), pts[n:]


def manifold(n, d, d_int, seed=0, queries=0, noise=0.001):
    """Points on a random ``d_int``-dimensional affine patch of R^d.

    The patch is spanned by a random orthonormal basis, coefficients are
    uniform in [0, 1], the patch is shifted by a random offset, and every
    coordinate gets Gaussian noise of standard deviation ``noise``.
    """
    _check_sizes(n, d)
    if not 1 <= d_int <= d:
        raise ValueError(f"intrinsic dimension must be in [1, {d}], got {d_int}")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, d_int)))
    shift = rng.random(d)
    coeffs = rng.random((n + queries, d_int))
    pts = coeffs @ basis.T + shift + rng.normal(0.0, noise, (n + queries, d))
    pts = pts.astype(np.float32)
    return Dataset(pts[:n], name=f"manifold-{n}x{d}-{d_int}"), pts[n:]


def random_strings(n, length, seed=0, queries=0, alphabet="ACGT"):
    """Uniformly random fixed-length strings."""
    if n < 1 or length < 1:
        raise ValueError("n and length must be positive")
    rng = np.random.default_rng(seed)
    codes = np.frombuffer(alphabet.encode(), dtype=np.uint8)
    draws = codes[rng.integers(0, len(codes), (n + queries, length))]
    seqs = [row.tobytes().decode() for row in draws]
    return Dataset.from_sequences(seqs[:n], name=f"strings-{n}x{length}"), seqs[n:]


def _check_sizes(n, d):
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
