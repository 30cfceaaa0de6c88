"""Directed graphs obtained by doubling an undirected edge set."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import torch

UNREACHABLE = -1


@dataclass(frozen=True, eq=False)
class DirectedGraph:
    """The graph G together with its reversal.

    ``arcs`` is an (m, 2) array of (source, target) pairs sorted by source then
    target, so the arcs leaving node ``i`` are ``arcs[indptr[i]:indptr[i + 1]]``.
    Every arc appears together with its reverse.
    """

    num_nodes: int
    arcs: np.ndarray
    indptr: np.ndarray

    @property
    def num_arcs(self) -> int:
        return len(self.arcs)

    @property
    def sources(self) -> np.ndarray:
        return self.arcs[:, 0]

    @property
    def targets(self) -> np.ndarray:
        return self.arcs[:, 1]

    def neighbors(self, i: int) -> np.ndarray:
        return self.arcs[self.indptr[i]:self.indptr[i + 1], 1]

    @cached_property
    def neighbor_index(self) -> list[np.ndarray]:
        return [self.neighbors(i) for i in range(self.num_nodes)]

    @cached_property
    def out_degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.num_nodes)

    @property
    def degree(self) -> np.ndarray:
        # in = out on a doubled graph
        return self.out_degree

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.int64)
        a[self.sources, self.targets] = 1
        return a

    def undirected_edges(self) -> list[tuple[int, int]]:
        mask = self.sources < self.targets
        return [(int(i), int(j)) for i, j in self.arcs[mask]]

    # torch views, built once per graph
    @cached_property
    def source_index(self) -> torch.Tensor:
        return torch.as_tensor(self.sources, dtype=torch.long)

    @cached_property
    def target_index(self) -> torch.Tensor:
        return torch.as_tensor(self.targets, dtype=torch.long)

    @cached_property
    def degree_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.out_degree, dtype=torch.float64)

    def __repr__(self) -> str:
        return f"DirectedGraph(num_nodes={self.num_nodes}, num_arcs={self.num_arcs})"


def from_undirected_edges(edges: Iterable[Sequence[int]], num_nodes: int) -> DirectedGraph:
    """Double an undirected edge list into arcs (i, j) and (j, i).

    Repeated edges, in either orientation, collapse to a single undirected edge.
    Raises ``ValueError`` on self-loops or out-of-range indices.
    """
    if num_nodes < 0:
        raise ValueError(f"num_nodes must be non-negative, got {num_nodes}")
    undirected = set()
    for pos, edge in enumerate(edges):
        if len(edge) != 2:
            raise ValueError(f"edge #{pos} must be a pair, got {edge!r}")
        i, j = int(edge[0]), int(edge[1])
        for v in (i, j):
            if not 0 <= v < num_nodes:
                raise ValueError(f"edge #{pos} ({i}, {j}): node {v} out of range [0, {num_nodes})")
        if i == j:
            raise ValueError(f"edge #{pos} ({i}, {j}) is a self-loop")
        undirected.add((min(i, j), max(i, j)))

    arcs = np.array(sorted({a for i, j in undirected for a in ((i, j), (j, i))}), dtype=np.int64)
    arcs = arcs.reshape(-1, 2)
    counts = np.bincount(arcs[:, 0], minlength=num_nodes) if len(arcs) else np.zeros(num_nodes, np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return DirectedGraph(num_nodes=num_nodes, arcs=arcs, indptr=indptr)


def bfs_distances(g: DirectedGraph, source: int) -> np.ndarray:
    """Hop distance from ``source`` along arcs; unreachable nodes get ``UNREACHABLE``."""
    if not 0 <= source < g.num_nodes:
        raise ValueError(f"source {source} out of range [0, {g.num_nodes})")
    dist = np.full(g.num_nodes, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if dist[v] == UNREACHABLE:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def hop_ball(g: DirectedGraph, center: int, radius: int) -> set[int]:
    dist = bfs_distances(g, center)
    return {int(v) for v in np.flatnonzero((dist != UNREACHABLE) & (dist <= radius))}


def disjoint_union(graphs: Sequence[DirectedGraph]) -> tuple[DirectedGraph, np.ndarray]:
    """Place graphs side by side; returns the union and each part's node offset."""
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
    edges = [(i + off, j + off) for g, off in zip(graphs, offsets) for i, j in g.undirected_edges()]
    return from_undirected_edges(edges, int(offsets[-1])), offsets[:-1]


def relabel(g: DirectedGraph, perm: Sequence[int]) -> DirectedGraph:
    """Graph with node ``i`` renamed to ``perm[i]``."""
    perm = np.asarray(perm)
    return from_undirected_edges([(perm[i], perm[j]) for i, j in g.undirected_edges()], g.num_nodes)


def path_graph(num_nodes: int) -> DirectedGraph:
    return from_undirected_edges([(i, i + 1) for i in range(num_nodes - 1)], num_nodes)


def cycle_graph(num_nodes: int) -> DirectedGraph:
    return from_undirected_edges([(i, (i + 1) % num_nodes) for i in range(num_nodes)], num_nodes)


def random_graph(num_nodes: int, edge_prob: float, rng: np.random.Generator) -> DirectedGraph:
    iu, ju = np.triu_indices(num_nodes, k=1)
    keep = rng.random(len(iu)) < edge_prob
    return from_undirected_edges(zip(iu[keep], ju[keep]), num_nodes)


def random_tree(depth: int, rng: np.random.Generator, max_children: int = 3) -> DirectedGraph:
    """Random rooted tree (root 0) whose deepest leaf sits exactly ``depth`` hops away.

    A spine of length ``depth`` guarantees the depth; every node above the
    last level gets up to ``max_children - 1`` extra random children.
    """
    edges = [(i, i + 1) for i in range(depth)]
    level = {i: i for i in range(depth + 1)}
    frontier = list(range(depth))
    n = depth + 1
    while frontier:
        nxt = []
        for u in frontier:
            for _ in range(int(rng.integers(0, max_children))):
                edges.append((u, n))
                level[n] = level[u] + 1
                if level[n] < depth:
                    nxt.append(n)
                n += 1
        frontier = nxt
    return from_undirected_edges(edges, n)
