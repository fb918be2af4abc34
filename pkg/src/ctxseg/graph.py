"""Context graph over foreground tiles: 4-connectivity, normalized adjacency, hop sets."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .synthwsi import TileGrid


class EmptyGraphError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ContextGraph:
    coords: tuple[tuple[int, int], ...]
    edges: tuple[tuple[int, int], ...]  # i < j
    adjacency: np.ndarray  # (N, N) 0/1 float64
    norm_adjacency: np.ndarray  # (N, N) float64
    _neighbors: tuple[tuple[int, ...], ...] = field(repr=False, default=())

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.int64)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self._neighbors[i]

    def index_of(self) -> dict[tuple[int, int], int]:
        return {c: i for i, c in enumerate(self.coords)}


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"adjacency must be square, got shape {A.shape}")
    if not np.array_equal(A, A.T):
        raise ContractError("adjacency is not symmetric")
    if np.any(np.diag(A) != 0):
        raise ContractError("adjacency has a nonzero diagonal")
    A_hat = A + np.eye(A.shape[0])
    d = A_hat.sum(axis=1)
    # sqrt of the product: the diagonal comes out as exactly 1/(d_i + 1)
    out = A_hat / np.sqrt(d[:, None] * d[None, :])
    # mirror the upper triangle so symmetry is exact, not just within rounding
    iu = np.triu_indices(out.shape[0], 1)
    out[(iu[1], iu[0])] = out[iu]
    return out


def graph_from_coords(coords) -> ContextGraph:
    coords = tuple((int(r), int(c)) for r, c in coords)
    if not coords:
        raise EmptyGraphError("context graph needs at least one foreground tile")
    index = {c: i for i, c in enumerate(coords)}
    if len(index) != len(coords):
        raise ContractError("duplicate tile coordinates")
    edges = []
    for i, (r, c) in enumerate(coords):
        for nb in ((r, c + 1), (r + 1, c)):
            j = index.get(nb)
            if j is not None:
                edges.append((min(i, j), max(i, j)))
    edges.sort()
    n = len(coords)
    A = np.zeros((n, n), dtype=np.float64)
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        A[i, j] = A[j, i] = 1.0
        nbrs[i].append(j)
        nbrs[j].append(i)
    return ContextGraph(coords, tuple(edges), A, normalize_adjacency(A),
                        tuple(tuple(sorted(x)) for x in nbrs))


def build_context_graph(grid: TileGrid) -> ContextGraph:
    """Nodes are foreground tiles in row-major order; edges join 4-adjacent pairs."""
    return graph_from_coords(grid.coords)


def hop_distances(graph: ContextGraph, i: int) -> np.ndarray:
    """BFS distances from ``i``; -1 marks unreachable nodes."""
    if not 0 <= i < graph.n_nodes:
        raise IndexError(f"node {i} out of range for graph with {graph.n_nodes} nodes")
    dist = np.full(graph.n_nodes, -1, dtype=np.int64)
    dist[i] = 0
    queue = deque([i])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors(u):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def k_hop_neighborhood(graph: ContextGraph, i: int, t: int) -> set[int]:
    """Nodes at shortest-path distance exactly ``t`` from ``i``."""
    if t < 0:
        raise ValueError(f"hop count must be >= 0, got {t}")
    dist = hop_distances(graph, i)
    return set(np.flatnonzero(dist == t).tolist())


def connected_components(graph: ContextGraph) -> list[list[int]]:
    seen = np.zeros(graph.n_nodes, dtype=bool)
    comps = []
    for s in range(graph.n_nodes):
        if seen[s]:
            continue
        members = np.flatnonzero(hop_distances(graph, s) >= 0)
        seen[members] = True
        comps.append(members.tolist())
    return comps


def graph_stats(graph: ContextGraph) -> dict:
    deg = graph.degrees
    hist = np.bincount(deg, minlength=5) if deg.size else np.zeros(5, dtype=np.int64)
    return {
        "nodes": graph.n_nodes,
        "edges": len(graph.edges),
        "degree_histogram": {str(d): int(c) for d, c in enumerate(hist)},
        "components": len(connected_components(graph)),
    }
