"""Synthetic augmentation: grow a dataset by jittering every point."""

import json
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset

__all__ = ["AugmentSpec", "augment", "augment_sources", "write_sources"]


@dataclass(frozen=True)
class AugmentSpec:
    multiplier: int
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.multiplier, bool) or int(self.multiplier) != self.multiplier:
            raise ValueError(f"multiplier must be an integer, got {self.multiplier!r}")
        if self.multiplier < 1:
            raise ValueError(f"multiplier must be >= 1, got {self.multiplier}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _ball(rng, count, dim, epsilon):
    """``count`` offsets uniform in the ``dim``-ball of radius ``epsilon``."""
    direction = rng.standard_normal((count, dim))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    # a zero draw has probability zero, but guard the division anyway
    norms[norms == 0.0] = 1.0
    u = 1.0 - rng.random((count, 1))  # (0, 1]
    return direction / norms * (epsilon * u ** (1.0 / dim))


def augment(d, spec):
    """``spec.multiplier`` copies of ``d``: the originals, then jittered copies.

    Point ``n * j + i`` (``j >= 1``) is point ``i`` moved by a vector drawn
    uniformly from the ball of radius ``epsilon``. The stored dtype is kept;
    offsets that rounding would push past ``epsilon`` are shrunk until the
    stored point is within ``epsilon`` of its source again.
    """
    if d.is_ragged:
        raise ValueError("augmentation needs fixed-dimensional real vectors")
    m = spec.multiplier
    if m == 1:
        return Dataset(d.points.copy(), d.permutation.copy(), name=d.name)
    base = np.asarray(d.points)
    n, dim = base.shape
    rng = np.random.default_rng(spec.seed)
    src = np.tile(base.astype(np.float64), (m - 1, 1))
    offsets = _ball(rng, n * (m - 1), dim, spec.epsilon)
    synth = (src + offsets).astype(base.dtype)
    bad = np.linalg.norm(synth.astype(np.float64) - src, axis=1) > spec.epsilon
    while bad.any():
        offsets[bad] *= 1.0 - 2.0 ** -20
        synth[bad] = (src[bad] + offsets[bad]).astype(base.dtype)
        bad = np.linalg.norm(synth.astype(np.float64) - src, axis=1) > spec.epsilon
    points = np.concatenate([base, synth])
    return Dataset(points, name=f"{d.name}-x{m}")


def augment_sources(n, m):
    """Source index of every point of an ``m``-fold augmentation of ``n`` points."""
    return np.tile(np.arange(n, dtype=np.int64), m)


def write_sources(path, n, spec):
    record = {
        "source_cardinality": n,
        "multiplier": spec.multiplier,
        "epsilon": spec.epsilon,
        "seed": spec.seed,
        "sources": augment_sources(n, spec.multiplier).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(record, fh)
        fh.write("\n")
