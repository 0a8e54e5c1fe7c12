"""Weighted empirical measures, the exact one-dimensional W2 metric and moments."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySampleSet,
    InvalidMeasure,
    NonFiniteEntry,
    UnsupportedDimension,
)

WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Finite weighted point cloud in R^d.

    ``points`` has shape (n, d) and ``weights`` shape (n,). Both arrays are
    made read-only on construction so one instance can be shared by workers.
    """

    points: np.ndarray
    weights: np.ndarray
    dim: int = field(default=0)

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise InvalidMeasure("points must be a non-empty (n, d) array")
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise InvalidMeasure(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise NonFiniteEntry("measure contains NaN or infinite entries")
        if np.any(w < 0):
            raise InvalidMeasure("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise InvalidMeasure(f"weights sum to {w.sum()!r}, not 1")
        dim = self.dim or pts.shape[1]
        if pts.shape[1] != dim:
            raise DimensionMismatch(f"points have length {pts.shape[1]}, declared dim {dim}")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "dim", dim)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    @cached_property
    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.points**2, axis=1))

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted average of per-atom values along the first axis."""
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def with_points(self, points: np.ndarray) -> "EmpiricalMeasure":
        """Same weights, atoms moved to ``points``."""
        return EmpiricalMeasure(points, self.weights, self.dim)

    def __repr__(self) -> str:
        return f"EmpiricalMeasure(n={self.size}, dim={self.dim}, mean={self.mean.tolist()})"


def dirac(point: Sequence[float] | float) -> EmpiricalMeasure:
    return EmpiricalMeasure(np.atleast_1d(np.asarray(point, dtype=float))[None, :], np.ones(1))


def empirical_from_samples(samples) -> EmpiricalMeasure:
    """Uniformly weighted measure on the given samples (scalars or vectors)."""
    arr = np.asarray(samples, dtype=float)
    if arr.size == 0:
        raise EmptySampleSet("cannot build a measure from zero samples")
    if arr.ndim == 1:
        arr = arr[:, None]
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEntry("samples contain NaN or infinite entries")
    n = arr.shape[0]
    return EmpiricalMeasure(arr, np.full(n, 1.0 / n))


def _quantile_pieces(mu: EmpiricalMeasure):
    order = np.argsort(mu.points[:, 0], kind="stable")
    x = mu.points[order, 0]
    cdf = np.cumsum(mu.weights[order])
    cdf[-1] = 1.0
    return x, cdf


def wasserstein2_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W2 between two weighted 1-d clouds through the quantile coupling."""
    if mu.dim != nu.dim:
        raise DimensionMismatch(f"dimensions differ: {mu.dim} vs {nu.dim}")
    if mu.dim != 1:
        raise UnsupportedDimension("exact W2 is only available in dimension 1")
    xa, ca = _quantile_pieces(mu)
    xb, cb = _quantile_pieces(nu)
    levels = np.union1d(ca, cb)
    levels = levels[levels > 0]
    mass = np.diff(np.concatenate(([0.0], levels)))
    mid = levels - 0.5 * mass
    qa = xa[np.minimum(np.searchsorted(ca, mid), len(xa) - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid), len(xb) - 1)]
    return float(np.sqrt(max(np.sum(mass * (qa - qb) ** 2), 0.0)))


def moment(mu: EmpiricalMeasure, k: int) -> np.ndarray:
    """Componentwise k-th raw moment."""
    if int(k) != k or k < 1:
        raise ValueError("moment order must be a positive integer")
    return mu.weights @ (mu.points ** int(k))


def write_csv(mu: EmpiricalMeasure, path: str | Path) -> None:
    header = [f"x_{i}" for i in range(mu.dim)] + ["w"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, w in zip(mu.points, mu.weights):
            writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])


def read_csv(path: str | Path) -> EmpiricalMeasure:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "w" or any(h != f"x_{i}" for i, h in enumerate(header[:-1])):
            raise InvalidMeasure(f"unexpected header {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.array(rows, dtype=float)
    if arr.size == 0:
        raise EmptySampleSet(f"{path} has no atoms")
    return EmpiricalMeasure(arr[:, :-1], arr[:, -1])
