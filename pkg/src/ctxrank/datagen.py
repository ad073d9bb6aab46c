"""Synthetic benchmarks: the medoid and the hypervolume-contribution problem.

Both generators produce rankings from exact oracles. Hypervolume uses the
minimization convention: a point dominates the box between itself and the
reference point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .ranklosses import rank_from_scores

MEDOID = "medoid"
HYPERVOLUME = "hypervolume"


@dataclass(frozen=True)
class GeneratorSpec:
    problem: str
    n_instances: int
    n_objects: int
    dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.problem not in (MEDOID, HYPERVOLUME):
            raise ValueError(f"unknown problem {self.problem!r}; expected medoid or hypervolume")
        if self.n_instances < 1 or self.n_objects < 1:
            raise ValueError("n_instances and n_objects must be positive")
        if self.dim < 2:
            raise ValueError(f"dim must be at least 2, got {self.dim}")
        if self.problem == HYPERVOLUME and self.dim not in (2, 3):
            raise ValueError(f"hypervolume supports dim in {{2, 3}} only, got {self.dim}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


# -- medoid -----------------------------------------------------------------


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[..., :, None, :] - points[..., None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def medoid(points) -> int:
    """Index of the point with the smallest mean distance to all points."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise ValueError("medoid of an empty set")
    return int(np.argmin(_pairwise_distances(points).mean(axis=-1)))


def medoid_rankings(points: np.ndarray) -> np.ndarray:
    """Rank each task of shape (..., n, d) by ascending distance to its medoid."""
    dist = _pairwise_distances(points)
    m = np.argmin(dist.mean(axis=-1), axis=-1)
    to_medoid = np.take_along_axis(dist, m[..., None, None], axis=-2)[..., 0, :]
    return rank_from_scores(-to_medoid)


def gen_medoid(spec: GeneratorSpec) -> Dataset:
    if spec.problem != MEDOID:
        raise ValueError("spec is not a medoid spec")
    rng = np.random.default_rng(spec.seed)
    X = rng.random((spec.n_instances, spec.n_objects, spec.dim))
    return Dataset.from_arrays(X, medoid_rankings(X))


# -- hypervolume ------------------------------------------------------------


def sample_neg_sphere(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform sample(s) on the unit sphere restricted to the negative orthant."""
    if d < 2:
        raise ValueError("dimension must be at least 2")
    shape = (d,) if size is None else (size, d)
    g = -np.abs(rng.standard_normal(shape))
    flat = g.reshape(-1, d)
    for i in np.flatnonzero(~flat.any(axis=1)):
        while not flat[i].any():
            flat[i] = -np.abs(rng.standard_normal(d))
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norm


def _check_hv_input(points, ref):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be an (n, d) array")
    d = points.shape[1]
    ref = np.zeros(d) if ref is None else np.asarray(ref, dtype=np.float64)
    if d not in (2, 3):
        raise ValueError(f"exact hypervolume supports d in {{2, 3}}, got {d}")
    if ref.shape != (d,):
        raise ValueError("reference point has the wrong dimension")
    if np.any(points > ref):
        raise ValueError("every point must lie below the reference point in all coordinates")
    return points, ref


def _hv2d(points: np.ndarray, ref: np.ndarray) -> float:
    order = np.lexsort((points[:, 1], points[:, 0]))
    volume = 0.0
    prev_y = ref[1]
    for x, y in points[order]:
        if y < prev_y:
            volume += (ref[0] - x) * (prev_y - y)
            prev_y = y
    return float(volume)


def _hv3d(points: np.ndarray, ref: np.ndarray) -> float:
    # exact measure on the grid of distinct coordinates
    axes = [np.unique(np.append(points[:, k], ref[k])) for k in range(3)]
    lo = np.meshgrid(*(a[:-1] for a in axes), indexing="ij")
    widths = np.meshgrid(*(np.diff(a) for a in axes), indexing="ij")
    corner = np.stack(lo, axis=-1)
    covered = np.zeros(corner.shape[:-1], dtype=bool)
    for p in points:
        covered |= np.all(corner >= p, axis=-1)
    return float((widths[0] * widths[1] * widths[2])[covered].sum())


def hypervolume(points, ref=None) -> float:
    points, ref = _check_hv_input(points, ref)
    if len(points) == 0:
        return 0.0
    return _hv2d(points, ref) if points.shape[1] == 2 else _hv3d(points, ref)


def _front2d_contributions(points: np.ndarray, ref: np.ndarray) -> np.ndarray | None:
    # On a 2D front of mutually non-dominated points each exclusive region is a single
    # rectangle bounded by the two neighbours. Computing it directly (instead of as a
    # difference of two totals) keeps mirror-symmetric points exactly tied.
    order = np.argsort(points[:, 0], kind="stable")
    xs, ys = points[order, 0], points[order, 1]
    if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) >= 0):
        return None
    x_next = np.append(xs[1:], ref[0])
    y_prev = np.insert(ys[:-1], 0, ref[1])
    out = np.empty(len(points))
    out[order] = (x_next - xs) * (y_prev - ys)
    return out


def hv_contributions(points, ref=None) -> np.ndarray:
    """Exclusive contribution of each point: hyp(Q) - hyp(Q without that point)."""
    points, ref = _check_hv_input(points, ref)
    if points.shape[1] == 2 and len(points) > 0:
        front = _front2d_contributions(points, ref)
        if front is not None:
            return front
    total = hypervolume(points, ref)
    keep = np.ones(len(points), dtype=bool)
    out = np.empty(len(points))
    for j in range(len(points)):
        keep[j] = False
        out[j] = max(total - hypervolume(points[keep], ref), 0.0)
        keep[j] = True
    return out


def gen_hypervolume(spec: GeneratorSpec) -> Dataset:
    if spec.problem != HYPERVOLUME:
        raise ValueError("spec is not a hypervolume spec")
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_objects, spec.dim
    X = sample_neg_sphere(d, rng, size=spec.n_instances * n).reshape(spec.n_instances, n, d)
    R = np.empty((spec.n_instances, n), dtype=np.int64)
    ref = np.zeros(d)
    for i in range(spec.n_instances):
        # duplicated points would dominate each other; redraw them
        while len(np.unique(X[i], axis=0)) < n:
            X[i] = sample_neg_sphere(d, rng, size=n)
        R[i] = rank_from_scores(hv_contributions(X[i], ref))
    return Dataset.from_arrays(X, R)


def generate(spec: GeneratorSpec) -> Dataset:
    return gen_medoid(spec) if spec.problem == MEDOID else gen_hypervolume(spec)
