"""Epoch construction for adaptive asynchronous gossip.

Finished workers accumulate an edge set P and vertex set V until the graph
(V, P) connects every worker, at which point the epoch resets. One edge is
committed per virtual iteration; the gossip group formed around a committed
edge may contain additional already-waiting workers.

Two acceptance rules are provided:

* ``component`` (default): an edge is acceptable when it joins two distinct
  connected components of (V, P), treating unseen vertices as singletons.
  Every accepted edge merges two components, so an epoch commits exactly
  N-1 edges and (V, P) is a spanning tree at completion.
* ``literal``: an edge is acceptable when at least one endpoint is not yet
  in V. This stricter rule can dead-end with V complete but (V, P) a
  disconnected forest; it is kept behind a switch for fidelity experiments.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .topology import Topology

__all__ = [
    "PathsearchError",
    "PathSearchState",
    "acceptable_edge",
    "commit_edge",
    "epoch_complete",
    "reset_epoch",
    "group_for_finisher",
]

Edge = tuple[int, int]

COMPONENT_RULE = "component"
LITERAL_RULE = "literal"


class PathsearchError(ValueError):
    pass


class _UnionFind:
    """Incremental connected components; vertices default to singletons."""

    def __init__(self):
        self.parent: dict[int, int] = {}

    def find(self, v: int) -> int:
        parent = self.parent
        if v not in parent:
            return v
        root = v
        while parent.get(root, root) != root:
            root = parent[root]
        while parent.get(v, v) != v:
            parent[v], v = root, parent[v]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent.setdefault(ra, ra)
            self.parent[rb] = ra


@dataclass
class PathSearchState:
    """Mutable per-run search state: edge set P, vertex set V, epoch counters."""

    n_workers: int
    rule: str = COMPONENT_RULE
    accepted_edges: set[Edge] = field(default_factory=set)
    seen_vertices: set[int] = field(default_factory=set)
    epoch_index: int = 0
    iterations_this_epoch: int = 0
    epoch_lengths: list[int] = field(default_factory=list)
    _components: _UnionFind = field(default_factory=_UnionFind, repr=False)

    def __post_init__(self):
        if self.rule not in (COMPONENT_RULE, LITERAL_RULE):
            raise PathsearchError(f"unknown pathsearch rule {self.rule!r}")

    @classmethod
    def for_topology(cls, topology: Topology, rule: str = COMPONENT_RULE) -> "PathSearchState":
        return cls(n_workers=topology.n_workers, rule=rule)

    def realized_b(self) -> int:
        """Max committed edges over completed epochs (0 if none completed)."""
        return max(self.epoch_lengths, default=0)


def _norm(edge) -> Edge:
    i, j = edge
    return (i, j) if i < j else (j, i)


def acceptable_edge(state: PathSearchState, edge, topology: Topology) -> bool:
    """Whether committing ``edge`` would extend the current epoch."""
    i, j = _norm(edge)
    if i == j or (i, j) not in topology.edges:
        return False
    if (i, j) in state.accepted_edges:
        return False
    if state.rule == LITERAL_RULE:
        return i not in state.seen_vertices or j not in state.seen_vertices
    return state._components.find(i) != state._components.find(j)


def commit_edge(state: PathSearchState, edge, topology: Topology) -> PathSearchState:
    """Record an acceptable edge into (V, P); counts one virtual iteration."""
    e = _norm(edge)
    if not acceptable_edge(state, e, topology):
        raise PathsearchError(f"edge {e} is not acceptable in the current epoch state")
    state.accepted_edges.add(e)
    state.seen_vertices.update(e)
    state._components.union(*e)
    state.iterations_this_epoch += 1
    return state


def epoch_complete(state: PathSearchState, topology: Topology) -> bool:
    """True iff V covers all workers and (V, P) is connected."""
    if len(state.seen_vertices) != topology.n_workers or topology.n_workers == 0:
        return False
    roots = {state._components.find(v) for v in state.seen_vertices}
    return len(roots) == 1


def reset_epoch(state: PathSearchState, topology: Topology) -> PathSearchState:
    """Clear (V, P) after a completed epoch and record its realized length."""
    if not epoch_complete(state, topology):
        raise PathsearchError("cannot reset: epoch is not complete")
    state.epoch_lengths.append(state.iterations_this_epoch)
    state.accepted_edges.clear()
    state.seen_vertices.clear()
    state._components = _UnionFind()
    state.epoch_index += 1
    state.iterations_this_epoch = 0
    return state


def group_for_finisher(
    state: PathSearchState,
    finisher: int,
    waiting,
    topology: Topology,
) -> tuple[set[int], Edge] | None:
    """Try to form a gossip group around the most recent finisher.

    Scans topology edges between ``finisher`` and other waiting workers; if
    any is acceptable, returns the lexicographically smallest such edge plus
    the gossip group: the connected component of the waiting-set subgraph
    (topology edges restricted to waiting workers) that contains the edge.
    Returns None when the finisher must keep waiting.
    """
    waiting = set(waiting)
    if finisher not in waiting:
        raise PathsearchError(f"finisher {finisher} is not in the waiting set")
    candidates = sorted(
        _norm((finisher, other))
        for other in waiting
        if other != finisher and acceptable_edge(state, (finisher, other), topology)
    )
    if not candidates:
        return None
    edge = candidates[0]
    # Gossip group: everyone reachable from the new edge through waiting workers.
    group = set(edge)
    queue = deque(edge)
    while queue:
        v = queue.popleft()
        for w in topology.adjacency[v]:
            if w in waiting and w not in group:
                group.add(w)
                queue.append(w)
    return group, edge
