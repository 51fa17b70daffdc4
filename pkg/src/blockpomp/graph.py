"""Graph, neighborhoods, and block partitions for unit-indexed models.

Vertices are ordered by declaration; all block construction, stream labeling
and output ordering follow that order. Distances are shortest-path hop counts,
infinite across disconnected components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class SpatialGraph:
    """Finite undirected graph with an interaction radius.

    Args:
        vertices: ordered unit labels (strings) or a vertex count.
        edges: unordered pairs of vertex labels or indices.
        interaction_radius: hop radius r defining neighborhoods N(v).
    """

    def __init__(self, vertices, edges: Iterable = (), interaction_radius: int = 1):
        if isinstance(vertices, int):
            vertices = [f"u{i}" for i in range(vertices)]
        self.vertices: tuple[str, ...] = tuple(str(v) for v in vertices)
        if len(set(self.vertices)) != len(self.vertices):
            raise ValueError("duplicate vertex labels")
        if interaction_radius < 0:
            raise ValueError("interaction radius must be nonnegative")
        self.interaction_radius = int(interaction_radius)
        index = {v: i for i, v in enumerate(self.vertices)}
        pairs = []
        for a, b in edges:
            ia = index[a] if a in index else int(a)
            ib = index[b] if b in index else int(b)
            if ia == ib:
                raise ValueError("self loops not allowed")
            if not (0 <= ia < self.n_vertices and 0 <= ib < self.n_vertices):
                raise ValueError("edge endpoint out of range")
            pairs.append((min(ia, ib), max(ia, ib)))
        self.edges: tuple[tuple[int, int], ...] = tuple(sorted(set(pairs)))
        self._distances: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def adjacency_lists(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n_vertices)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]

    def distances(self) -> np.ndarray:
        """All-pairs shortest-path hop counts, np.inf when disconnected."""
        if self._distances is None:
            n = self.n_vertices
            adj = self.adjacency_lists()
            d = np.full((n, n), np.inf)
            for s in range(n):
                d[s, s] = 0.0
                frontier = [s]
                depth = 0
                while frontier:
                    depth += 1
                    nxt = []
                    for u in frontier:
                        for w in adj[u]:
                            if not np.isfinite(d[s, w]):
                                d[s, w] = depth
                                nxt.append(w)
                    frontier = nxt
            self._distances = d
        return self._distances

    def neighborhood(self, v: int) -> tuple[int, ...]:
        """N(v): vertices within the interaction radius, v included."""
        d = self.distances()
        return tuple(np.flatnonzero(d[v] <= self.interaction_radius).tolist())

    def vertex_index(self, label: str) -> int:
        return self.vertices.index(label)


def path_graph(n: int, interaction_radius: int = 1, labels=None) -> SpatialGraph:
    verts = labels if labels is not None else n
    return SpatialGraph(verts, [(i, i + 1) for i in range(n - 1)], interaction_radius)


def complete_graph(n_or_labels, interaction_radius: int = 1) -> SpatialGraph:
    g0 = SpatialGraph(n_or_labels, (), interaction_radius)
    n = g0.n_vertices
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return SpatialGraph(g0.vertices, edges, interaction_radius)


@dataclass(frozen=True)
class BlockPartition:
    """Disjoint covering blocks of vertex indices.

    ``stream_labels`` names each block's resampling stream; defaults to the
    block's position so runs are reproducible without configuration. Tests
    that align a sub-model's streams with a larger run may override labels.
    """

    blocks: tuple[tuple[int, ...], ...]
    stream_labels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks or any(len(b) == 0 for b in blocks):
            raise ValueError("blocks must be nonempty")
        labels = self.stream_labels or tuple(range(len(blocks)))
        if len(labels) != len(blocks):
            raise ValueError("one stream label per block required")
        object.__setattr__(self, "stream_labels", tuple(int(x) for x in labels))

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def validate(self, graph: SpatialGraph) -> None:
        seen: set[int] = set()
        for b in self.blocks:
            for v in b:
                if v in seen:
                    raise ValueError(f"vertex {v} appears in two blocks")
                if not (0 <= v < graph.n_vertices):
                    raise ValueError(f"vertex {v} not in graph")
                seen.add(v)
        if len(seen) != graph.n_vertices:
            raise ValueError("blocks do not cover the vertex set")


def whole_graph_partition(graph: SpatialGraph) -> BlockPartition:
    return BlockPartition((tuple(range(graph.n_vertices)),))


def build_contiguous_partition(graph: SpatialGraph, block_size: int) -> BlockPartition:
    """Blocks of consecutive vertices in declaration order.

    All blocks have ``block_size`` vertices except possibly a smaller last
    block; a size larger than the graph yields the whole-graph partition.
    """
    if block_size < 1:
        raise ValueError("block size must be at least 1")
    n = graph.n_vertices
    blocks = [tuple(range(i, min(i + block_size, n))) for i in range(0, n, block_size)]
    return BlockPartition(tuple(blocks))


def block_distance(graph: SpatialGraph, block_a: Sequence[int], block_b: Sequence[int]) -> float:
    d = graph.distances()
    return float(d[np.ix_(list(block_a), list(block_b))].min())


def boundary_vertices(graph: SpatialGraph, block: Sequence[int]) -> tuple[int, ...]:
    """Vertices of the block whose neighborhood leaves the block."""
    inside = set(int(v) for v in block)
    out = []
    for v in inside:
        if any(u not in inside for u in graph.neighborhood(v)):
            out.append(v)
    return tuple(sorted(out))


def graph_stats(graph: SpatialGraph, partition: BlockPartition) -> tuple[int, int, int]:
    """(max neighborhood size, max interacting blocks, max block size).

    Computed by exhaustive distance evaluation: the first is max_v |N(v)|,
    the second the largest number of blocks within radius r of one block
    (itself included), the third the largest block cardinality.
    """
    partition.validate(graph)
    d = graph.distances()
    r = graph.interaction_radius
    delta = int((d <= r).sum(axis=1).max())
    nb = partition.n_blocks
    delta_blocks = 0
    for i in range(nb):
        count = sum(
            1
            for j in range(nb)
            if block_distance(graph, partition.blocks[i], partition.blocks[j]) <= r
        )
        delta_blocks = max(delta_blocks, count)
    max_block = max(len(b) for b in partition.blocks)
    return delta, delta_blocks, max_block
