"""Static communication graphs: generation, connectivity queries, serialization.

Workers are dense 0-based integer ids so they can index directly into
consensus matrices. Edges are unordered pairs stored as (min, max) tuples;
self loops are never stored.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Topology",
    "random_connected_graph",
    "is_connected",
    "neighbors",
    "load_edge_list",
]

Edge = tuple[int, int]


def _norm_edge(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class Topology:
    """Undirected communication graph on workers {0, ..., n_workers-1}."""

    n_workers: int
    edges: frozenset[Edge]
    adjacency: tuple[frozenset[int], ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.n_workers < 1:
            raise ValueError(f"n_workers must be positive, got {self.n_workers}")
        adj: list[set[int]] = [set() for _ in range(self.n_workers)]
        for i, j in self.edges:
            if i == j:
                raise ValueError(f"self loop ({i},{j}) is not allowed")
            if not (0 <= i < self.n_workers and 0 <= j < self.n_workers):
                raise ValueError(f"edge ({i},{j}) out of range for n={self.n_workers}")
            if i > j:
                raise ValueError(f"edge ({i},{j}) must be stored as (min, max)")
            adj[i].add(j)
            adj[j].add(i)
        object.__setattr__(self, "adjacency", tuple(frozenset(s) for s in adj))

    @classmethod
    def from_edges(cls, n_workers: int, edges) -> "Topology":
        return cls(n_workers=n_workers, edges=frozenset(_norm_edge(i, j) for i, j in edges))

    def has_edge(self, i: int, j: int) -> bool:
        return _norm_edge(i, j) in self.edges

    def degree(self, j: int) -> int:
        return len(self.neighbors(j))

    def neighbors(self, j: int) -> frozenset[int]:
        """Neighbors of j, excluding j itself."""
        if not (0 <= j < self.n_workers):
            raise ValueError(f"unknown worker id {j} (n={self.n_workers})")
        return self.adjacency[j]

    def to_edge_list(self) -> str:
        """Plain-text edge list: first line "N M", then one "i j" line per edge."""
        lines = [f"{self.n_workers} {len(self.edges)}"]
        lines.extend(f"{i} {j}" for i, j in sorted(self.edges))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text: str) -> "Topology":
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows or len(rows[0]) != 2:
            raise ValueError("edge list must start with a 'N M' header line")
        n, m = int(rows[0][0]), int(rows[0][1])
        body = rows[1:]
        if len(body) != m:
            raise ValueError(f"edge list declares {m} edges but contains {len(body)}")
        return cls.from_edges(n, ((int(a), int(b)) for a, b in body))


def load_edge_list(path) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        return Topology.from_edge_list(fh.read())


def random_connected_graph(n: int, edge_prob: float, seed: int) -> Topology:
    """Seeded random connected graph on n vertices.

    A uniform random spanning tree (random Pruefer sequence) guarantees
    connectivity without rejection sampling; every remaining vertex pair is
    then added independently with probability ``edge_prob``.
    """
    if n < 2:
        raise ValueError(f"need at least 2 workers, got {n}")
    if not (0.0 <= edge_prob <= 1.0):
        raise ValueError(f"edge_prob must be in [0,1], got {edge_prob}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    edges = set(_pruefer_tree(n, rng))
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in edges and rng.random() < edge_prob:
                edges.add((i, j))
    return Topology(n_workers=n, edges=frozenset(edges))


def _pruefer_tree(n: int, rng: np.random.Generator) -> list[Edge]:
    """Decode a random Pruefer sequence into a uniform random labeled tree."""
    if n == 2:
        return [(0, 1)]
    seq = [int(rng.integers(0, n)) for _ in range(n - 2)]
    degree = [1] * n
    for v in seq:
        degree[v] += 1
    edges: list[Edge] = []
    # Repeatedly attach the smallest remaining leaf to the next sequence entry.
    import heapq

    leaves = [v for v in range(n) if degree[v] == 1]
    heapq.heapify(leaves)
    for v in seq:
        leaf = heapq.heappop(leaves)
        edges.append(_norm_edge(leaf, v))
        degree[v] -= 1
        if degree[v] == 1:
            heapq.heappush(leaves, v)
    u = heapq.heappop(leaves)
    v = heapq.heappop(leaves)
    edges.append(_norm_edge(u, v))
    return edges


def is_connected(g: Topology) -> bool:
    """True iff every vertex is reachable from vertex 0 (breadth-first search)."""
    if g.n_workers == 0:
        return True
    seen = {0}
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in g.adjacency[v]:
            if w not in seen:
                seen.add(w)
                queue.append(w)
    return len(seen) == g.n_workers


def neighbors(g: Topology, j: int) -> frozenset[int]:
    return g.neighbors(j)
