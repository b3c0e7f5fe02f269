"""Equal-weight empirical measures, second moments and the Wasserstein-2 distance."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError

EXACT_ASSIGNMENT_LIMIT = 256
SLICED_DIRECTIONS = 64
SLICED_SEED = 20240101


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Equal-weight atomic measure ``(1/count) sum_i delta_{points[i]}``.

    ``points`` has shape ``(count, n)``.  Leading batch axes are allowed,
    ``(..., count, n)``, so that independent particle systems can be carried
    through coefficient functions together; metric operations require an
    unbatched cloud.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim < 2 or pts.shape[-2] < 1:
            raise InputError("a cloud needs at least one point")
        object.__setattr__(self, "points", pts)

    @classmethod
    def dirac(cls, x) -> "ParticleCloud":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @property
    def dim(self) -> int:
        return self.points.shape[-1]

    @property
    def count(self) -> int:
        return self.points.shape[-2]

    @property
    def batched(self) -> bool:
        return self.points.ndim > 2

    def mean(self) -> np.ndarray:
        """Barycentre with the particle axis kept, shape ``(..., 1, n)``."""
        return self.points.mean(axis=-2, keepdims=True)

    def second_moment(self):
        return second_moment(self)

    def shifted(self, v) -> "ParticleCloud":
        return ParticleCloud(self.points + np.asarray(v, dtype=float))

    def digest(self, sig: int = 6) -> tuple:
        """First two moments rounded to ``sig`` significant digits (cache key)."""
        if self.batched:
            raise InputError("digest needs an unbatched cloud")
        m1 = self.points.mean(axis=0)
        m2 = (self.points[:, :, None] * self.points[:, None, :]).mean(axis=0)
        vals = np.concatenate([m1, m2[np.triu_indices(self.dim)]])
        return tuple(float(f"{v:.{sig - 1}e}") for v in vals)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(self.dim)])
        for p in self.points.reshape(-1, self.dim):
            writer.writerow([repr(float(v)) for v in p])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "ParticleCloud":
        rows = list(csv.reader(io.StringIO(Path(path).read_text())))
        return cls(np.array([[float(v) for v in r] for r in rows[1:]]))


def second_moment(c: ParticleCloud):
    """``(1/count) sum |x_i|^2``; an array for batched clouds."""
    val = np.mean(np.sum(c.points ** 2, axis=-1), axis=-1)
    return float(val) if np.ndim(val) == 0 else val


def _check_pair(a: ParticleCloud, b: ParticleCloud) -> None:
    if a.batched or b.batched:
        raise InputError("w2_distance needs unbatched clouds")
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.count != b.count:
        raise InputError(f"unequal counts {a.count} vs {b.count}; resample upstream")


def w2_is_exact(a: ParticleCloud, b: ParticleCloud) -> bool:
    """Whether :func:`w2_distance` solves the transport problem exactly for this pair."""
    return a.dim == 1 or a.count <= EXACT_ASSIGNMENT_LIMIT


def w2_sorted_1d(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2)))


def w2_assignment(a: np.ndarray, b: np.ndarray) -> float:
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def w2_sliced(a: np.ndarray, b: np.ndarray, n_dir: int = SLICED_DIRECTIONS,
              seed: int = SLICED_SEED) -> float:
    """Sliced approximation: root-mean over random directions of 1-D W2^2, times sqrt(dim)."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_dir, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa, pb = np.sort(a @ dirs.T, axis=0), np.sort(b @ dirs.T, axis=0)
    # Rescaled by the dimension so that translations are reproduced in expectation.
    return float(np.sqrt(a.shape[1] * np.mean((pa - pb) ** 2)))


def w2_distance(a: ParticleCloud, b: ParticleCloud) -> float:
    """Wasserstein-2 distance between two equal-count empirical measures.

    1-D clouds use the sorted coupling; multi-D clouds up to
    ``EXACT_ASSIGNMENT_LIMIT`` atoms solve the assignment problem on squared
    costs; larger ones fall back to the sliced approximation (check
    :func:`w2_is_exact`).
    """
    _check_pair(a, b)
    if a.dim == 1:
        return w2_sorted_1d(a.points[:, 0], b.points[:, 0])
    if a.count <= EXACT_ASSIGNMENT_LIMIT:
        return w2_assignment(a.points, b.points)
    return w2_sliced(a.points, b.points)


def w2_batched_1d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised 1-D W2 over leading axes; inputs shaped ``(..., count, 1)``."""
    sa = np.sort(a[..., 0], axis=-1)
    sb = np.sort(b[..., 0], axis=-1)
    return np.sqrt(np.mean((sa - sb) ** 2, axis=-1))
