"""Sensor graph construction, scaled Laplacian and Chebyshev basis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import rng

__all__ = [
    "SensorGraph",
    "ChebBasis",
    "read_distance_csv",
    "build_adjacency",
    "scaled_laplacian",
    "largest_eigenvalue",
    "cheb_basis",
]


@dataclass(frozen=True)
class SensorGraph:
    n_vertices: int
    weights: np.ndarray
    edges: tuple = field(default=())

    def __post_init__(self):
        self.weights.setflags(write=False)


@dataclass(frozen=True)
class ChebBasis:
    order: int
    polys: tuple

    @property
    def n_vertices(self) -> int:
        return self.polys[0].shape[0]

    def stacked(self) -> np.ndarray:
        """Polynomials as one ``(K+1, N, N)`` array."""
        return np.stack(self.polys)


def read_distance_csv(path) -> list[tuple[int, int, float]]:
    """Read ``from,to,cost`` rows (single header row, 0-based vertex ids)."""
    records = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "cost"]:
            raise ValueError(f"{path}: expected header 'from,to,cost', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                records.append((int(row[0]), int(row[1]), float(row[2])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return records


def build_adjacency(
    records: Iterable[tuple[int, int, float]],
    n_vertices: int,
    sigma: float | None = None,
    epsilon: float = 0.1,
) -> SensorGraph:
    """Gaussian-kernel adjacency ``exp(-d^2/sigma^2)``, thresholded at ``epsilon``.

    Weights below ``epsilon`` are dropped (a weight equal to it is kept).  The
    result is symmetrized with an elementwise max and has a zero diagonal.  When
    ``sigma`` is None the standard deviation of all given distances is used.
    """
    records = [(int(i), int(j), float(d)) for i, j, d in records]
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    for i, j, d in records:
        if not (0 <= i < n_vertices and 0 <= j < n_vertices):
            raise IndexError(f"edge ({i}, {j}) out of range for {n_vertices} vertices")
        if d < 0 or not np.isfinite(d):
            raise ValueError(f"edge ({i}, {j}) has invalid distance {d}")
    if sigma is None:
        dists = np.array([d for _, _, d in records])
        sigma = float(dists.std()) if dists.size else 0.0
        if sigma == 0.0:
            raise ValueError("cannot infer sigma: distances are all zero (or absent)")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")

    w = np.zeros((n_vertices, n_vertices))
    for i, j, d in records:
        if i == j:
            continue
        val = np.exp(-(d * d) / (sigma * sigma))
        if val >= epsilon:
            w[i, j] = max(w[i, j], val)
    w = np.maximum(w, w.T)
    edges = tuple((i, j, d) for i, j, d in records if i != j)
    return SensorGraph(n_vertices, w, edges)


def largest_eigenvalue(mat: np.ndarray, max_iter: int = 100, rtol: float = 1e-9) -> tuple[float, bool]:
    """Power iteration for the dominant eigenvalue of a symmetric PSD matrix.

    Returns ``(estimate, converged)``.
    """
    n = mat.shape[0]
    v = rng(0).uniform(0.5, 1.5, size=n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0, True
        new = float(v @ w)
        v = w / nrm
        if lam != 0.0 and abs(new - lam) <= rtol * abs(new):
            return new, True
        lam = new
    return lam, False


def scaled_laplacian(g: SensorGraph | np.ndarray) -> np.ndarray:
    """Return ``(2/lambda_max) L - I`` for the normalized Laplacian ``L``.

    Isolated vertices get ``D^{-1/2} = 0``, so their row of ``L`` is the identity row.
    If power iteration does not converge, ``lambda_max = 2`` is used.
    """
    w = g.weights if isinstance(g, SensorGraph) else np.asarray(g, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"weights must be square, got shape {w.shape}")
    if not np.allclose(w, w.T, rtol=0.0, atol=1e-12):
        raise ValueError("weights must be symmetric")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    n = w.shape[0]
    deg = w.sum(axis=1)
    dinv = np.zeros(n)
    nz = deg > 0
    dinv[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(n) - dinv[:, None] * w * dinv[None, :]
    lap = 0.5 * (lap + lap.T)
    lam, ok = largest_eigenvalue(lap)
    if not ok or lam <= 0.0:
        lam = 2.0
    return (2.0 / lam) * lap - np.eye(n)


def cheb_basis(lap_scaled: np.ndarray, order: int = 3) -> ChebBasis:
    """Chebyshev polynomials ``T_0..T_K`` of the scaled Laplacian."""
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    lt = np.asarray(lap_scaled, dtype=np.float64)
    if lt.ndim != 2 or lt.shape[0] != lt.shape[1]:
        raise ValueError(f"scaled Laplacian must be square, got shape {lt.shape}")
    if not np.allclose(lt, lt.T, rtol=0.0, atol=1e-9):
        raise ValueError("scaled Laplacian must be symmetric")
    polys: list[np.ndarray] = [np.eye(lt.shape[0])]
    if order >= 1:
        polys.append(lt.copy())
    for _ in range(2, order + 1):
        polys.append(2.0 * lt @ polys[-1] - polys[-2])
    for p in polys:
        p.setflags(write=False)
    return ChebBasis(order, tuple(polys))


def graph_basis(g: SensorGraph, order: int = 3) -> ChebBasis:
    return cheb_basis(scaled_laplacian(g), order)


def permute_graph(g: SensorGraph, perm: Sequence[int]) -> SensorGraph:
    """Relabel vertices: new vertex ``k`` is old vertex ``perm[k]``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    edges = tuple((int(inv[i]), int(inv[j]), d) for i, j, d in g.edges)
    return SensorGraph(g.n_vertices, g.weights[np.ix_(perm, perm)].copy(), edges)
