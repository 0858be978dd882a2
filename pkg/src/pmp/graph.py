"""Graph topology and state containers, batching and edge-noise perturbation."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True, eq=False)
class GraphTopology:
    """Directed edges ``(src, dst)``; a message on edge e flows src -> dst.

    ``node_graph`` assigns nodes to member graphs when several instances are
    packed into one disjoint union (see :func:`batch`).
    """

    n_nodes: int
    edges: np.ndarray
    node_graph: np.ndarray = field(default=None)
    n_graphs: int = 1

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.node_graph is None:
            object.__setattr__(self, "node_graph", np.zeros(self.n_nodes, dtype=np.int64))
        if len(edges):
            if edges.min() < 0 or edges.max() >= self.n_nodes:
                raise ValueError(f"edge endpoint out of range for {self.n_nodes} nodes")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            codes = edges[:, 0] * self.n_nodes + edges[:, 1]
            if np.unique(codes).size != codes.size:
                raise ValueError("duplicate directed edges")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    @cached_property
    def edge_graph(self) -> np.ndarray:
        return self.node_graph[self.dst] if self.n_edges else np.zeros(0, dtype=np.int64)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)

    @cached_property
    def graph_sizes(self) -> np.ndarray:
        return np.bincount(self.node_graph, minlength=self.n_graphs)

    @cached_property
    def neighbor_index(self) -> list[np.ndarray]:
        """Incoming edge ids per node, ascending."""
        order = np.argsort(self.dst, kind="stable")
        splits = np.cumsum(self.in_degree)[:-1]
        return np.split(order, splits)

    def to_text(self) -> str:
        lines = [f"{self.n_nodes} {self.n_edges}"]
        lines += [f"{s} {d}" for s, d in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GraphTopology":
        rows = [ln.split() for ln in text.strip().splitlines()]
        n_nodes, n_edges = int(rows[0][0]), int(rows[0][1])
        if len(rows) - 1 != n_edges:
            raise ValueError(f"header promises {n_edges} edges, found {len(rows) - 1}")
        edges = np.array([[int(a), int(b)] for a, b in rows[1:]], dtype=np.int64).reshape(-1, 2)
        return cls(n_nodes, edges)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "GraphTopology":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class GraphState:
    """Node attributes ``V`` (N x Dv), one global row per member graph ``u``, step count."""

    V: Tensor
    u: Tensor
    step: int = 0


def fully_connected(n: int) -> GraphTopology:
    if n < 2:
        raise ValueError(f"a fully connected graph needs n >= 2, got {n}")
    src, dst = np.nonzero(~np.eye(n, dtype=bool))
    return GraphTopology(n, np.stack([src, dst], axis=1))


def undirected(n: int, pairs: np.ndarray) -> GraphTopology:
    """Expand undirected pairs to both directions, dropping self-loops and repeats."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both = both[both[:, 0] != both[:, 1]]
    codes = np.unique(both[:, 0] * n + both[:, 1])
    return GraphTopology(n, np.stack([codes // n, codes % n], axis=1))


def add_noise_edges(topo: GraphTopology, ratio: float, rng: np.random.Generator) -> GraphTopology:
    """Copy of ``topo`` with ``floor(ratio * |E|)`` extra directed edges drawn
    uniformly without replacement from absent non-self-loop pairs."""
    if ratio < 0:
        raise ValueError(f"noise ratio must be non-negative, got {ratio}")
    n = topo.n_nodes
    k = int(np.floor(ratio * topo.n_edges))
    if k == 0:
        return GraphTopology(n, topo.edges.copy(), topo.node_graph, topo.n_graphs)
    taken = np.zeros(n * n, dtype=bool)
    taken[topo.src * n + topo.dst] = True
    taken[np.arange(n) * (n + 1)] = True
    absent = np.flatnonzero(~taken)
    if absent.size < k:
        raise ValueError(f"cannot add {k} noise edges: only {absent.size} absent pairs")
    new = np.sort(rng.choice(absent, size=k, replace=False))
    edges = np.concatenate([topo.edges, np.stack([new // n, new % n], axis=1)])
    return GraphTopology(n, edges, topo.node_graph, topo.n_graphs)


def batch(topos: Sequence[GraphTopology]) -> GraphTopology:
    """Disjoint union; node ids of graph g are offset by the sizes of graphs before it."""
    offsets = np.cumsum([0] + [t.n_nodes for t in topos])
    edges = np.concatenate([t.edges + off for t, off in zip(topos, offsets[:-1])])
    node_graph = np.repeat(np.arange(len(topos)), [t.n_nodes for t in topos])
    return GraphTopology(int(offsets[-1]), edges, node_graph, len(topos))


def init_state(features: Tensor, topo: GraphTopology, encoder, d_global: int | None = None) -> GraphState:
    """Encode node features row-wise; the global vector starts at zero."""
    features = ad.constant(features)
    if features.shape[0] != topo.n_nodes:
        raise ValueError(f"{features.shape[0]} feature rows for {topo.n_nodes} nodes")
    V = encoder(features)
    dim = d_global or V.shape[1]
    u = Tensor(np.zeros((topo.n_graphs, dim), dtype=V.data.dtype))
    return GraphState(V, u, 0)


def segment_mean(x: Tensor, index: np.ndarray, counts: np.ndarray) -> Tensor:
    """Per-segment mean of rows; empty segments give zero rows."""
    total = ad.scatter_add_rows(x, index, len(counts))
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(x.data.dtype)
    return ad.mul(total, inv[:, None])
