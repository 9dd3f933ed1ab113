"""Road-network graph: distance matrix plus thresholded Gaussian-kernel adjacency."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateError, EmptyGraphError, ParseError, ReferentialError
from .io import atomic_write_text

DEFAULT_EPSILON = 0.1


def kernel_sigma(distances: np.ndarray) -> float:
    """Population standard deviation over all finite distance entries."""
    finite = distances[np.isfinite(distances)]
    if finite.size == 0:
        return 0.0
    return float(finite.std())


def build_adjacency(distances, epsilon: float = DEFAULT_EPSILON, sigma: float | None = None) -> np.ndarray:
    """Weights ``exp(-d^2 / sigma^2)``, zeroed where they fall below ``epsilon``.

    ``sigma`` defaults to the spread of the finite entries of ``distances``.
    Infinite distances mark unconnected pairs and get weight 0.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distances must be square, got shape {d.shape}")
    if np.isnan(d).any() or (d < 0).any():
        raise ValueError("distances must be non-negative")
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if sigma is None:
        sigma = kernel_sigma(d)
    if not sigma > 0:
        raise DegenerateError("all distances are equal; kernel width is zero")
    with np.errstate(over="ignore", invalid="ignore"):
        w = np.exp(-np.square(d) / sigma**2)
    w[~np.isfinite(d)] = 0.0
    w[w < epsilon] = 0.0
    return w


@dataclass(frozen=True)
class RoadGraph:
    vertex_ids: tuple[str, ...]
    distances: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    adjacency: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=np.float64)
        if d.shape != (len(self.vertex_ids), len(self.vertex_ids)):
            raise ValueError(f"distance matrix {d.shape} does not match {len(self.vertex_ids)} vertices")
        if len(set(self.vertex_ids)) != len(self.vertex_ids):
            raise ValueError("duplicate vertex ids")
        if (np.diag(d) != 0).any():
            raise ValueError("distance from a vertex to itself must be 0")
        d.setflags(write=False)
        object.__setattr__(self, "distances", d)
        if len(self.vertex_ids) == 1 or kernel_sigma(d) == 0:
            # a lone vertex (or no off-diagonal edges) only connects to itself
            adj = np.eye(len(self.vertex_ids))
        else:
            adj = build_adjacency(d, self.epsilon)
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_ids)

    def index(self, vertex_id: str) -> int:
        try:
            return self.vertex_ids.index(vertex_id)
        except ValueError:
            raise ReferentialError(f"unknown vertex id {vertex_id!r}") from None

    def edges(self) -> list[tuple[int, int, float]]:
        """Directed edges with positive kernel weight, self-loops excluded."""
        rows, cols = np.nonzero(self.adjacency)
        return [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(rows, cols) if i != j]


def load_graph(path, epsilon: float = DEFAULT_EPSILON) -> RoadGraph:
    """Read a ``from,to,distance`` edge list. Unlisted pairs are unconnected."""
    path = Path(path)
    ids: dict[str, int] = {}
    edges = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyGraphError(f"{path}: empty graph file")
        if [h.strip() for h in header] != ["from", "to", "distance"]:
            raise ParseError(f"expected header from,to,distance, got {','.join(header)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", path, lineno)
            a, b, dist = (c.strip() for c in row)
            if not a or not b:
                raise ParseError("empty vertex id", path, lineno)
            try:
                value = float(dist)
            except ValueError:
                raise ParseError(f"bad distance {dist!r}", path, lineno) from None
            if not math.isfinite(value) or value < 0:
                raise ParseError(f"distance must be finite and non-negative, got {dist}", path, lineno)
            for v in (a, b):
                ids.setdefault(v, len(ids))
            edges.append((ids[a], ids[b], value))
    if not ids:
        raise EmptyGraphError(f"{path}: no edges")
    n = len(ids)
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for i, j, value in edges:
        if i != j:
            d[i, j] = value
    return RoadGraph(tuple(ids), d, epsilon)


def save_graph(graph: RoadGraph, path) -> None:
    lines = ["from,to,distance"]
    n = graph.n_vertices
    for i in range(n):
        for j in range(n):
            if i != j and np.isfinite(graph.distances[i, j]):
                lines.append(f"{graph.vertex_ids[i]},{graph.vertex_ids[j]},{float(graph.distances[i, j])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def random_road_graph(n: int, seed: int = 0, neighbours: int = 3, extent: float = 10_000.0) -> RoadGraph:
    """Sensors scattered in a square, each linked both ways to its nearest neighbours.

    Link lengths are straight-line distance times a winding factor in
    [1.1, 1.5], and differ by direction.
    """
    if n < 1:
        raise ValueError("need at least one vertex")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, extent, size=(n, 2))
    euclid = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    k = min(neighbours, n - 1)
    for i in range(n):
        for j in np.argsort(euclid[i])[1 : k + 1]:
            for a, b in ((i, j), (j, i)):
                if not np.isfinite(d[a, b]):
                    d[a, b] = euclid[a, b] * rng.uniform(1.1, 1.5)
    ids = tuple(f"s{i:03d}" for i in range(n))
    return RoadGraph(ids, d)


def check_ids(graph: RoadGraph, ids) -> list[int]:
    """Positions of ``ids`` in the graph's vertex order."""
    return [graph.index(v) for v in ids]
