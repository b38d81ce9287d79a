"""Sparse undirected graphs with a directed-edge index for message passing.

Directed edges are stored in compressed-row form grouped by *destination*:
the slots ``indptr[i]:indptr[i+1]`` hold the edges ``k -> i`` entering node
``i`` and ``src[e]`` is ``k``. ``rev[e]`` is the slot of the opposite edge
``i -> k``. A message array indexed by slot therefore stores ``chi^{k->i}``
contiguously per receiving node, which is what the BP update sums over.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import InvalidParameterError


@dataclass(frozen=True, eq=False)
class Graph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) int64, i < j, lexicographically sorted
    indptr: np.ndarray = field(repr=False)
    src: np.ndarray = field(repr=False)
    dst: np.ndarray = field(repr=False)
    rev: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "Graph":
        n_nodes = int(n_nodes)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
            raise InvalidParameterError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise InvalidParameterError("self-loops are not allowed")
        edges = np.sort(edges, axis=1)
        keys = edges[:, 0] * n_nodes + edges[:, 1]
        order = np.argsort(keys, kind="stable")
        edges, keys = edges[order], keys[order]
        if np.any(keys[1:] == keys[:-1]):
            raise InvalidParameterError("duplicate edges are not allowed")

        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        dkeys = dst * n_nodes + src
        order = np.argsort(dkeys, kind="stable")
        src, dst, dkeys = src[order], dst[order], dkeys[order]
        rev = np.searchsorted(dkeys, src * n_nodes + dst).astype(np.int64)
        indptr = np.zeros(n_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=n_nodes), out=indptr[1:])
        edges = np.ascontiguousarray(edges)
        for a in (edges, indptr, src, dst, rev):
            a.setflags(write=False)
        return cls(n_nodes, edges, indptr, src, dst, rev)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def n_directed(self) -> int:
        return int(self.src.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, i: int) -> np.ndarray:
        return self.src[self.indptr[i]:self.indptr[i + 1]]

    def mean_degree(self) -> float:
        return 2.0 * self.n_edges / self.n_nodes if self.n_nodes else 0.0

    def to_scipy(self) -> sparse.csr_matrix:
        """Symmetric 0/1 adjacency matrix in CSR form (row i lists the neighbours of i)."""
        data = np.ones(self.n_directed, dtype=np.float64)
        return sparse.csr_matrix((data, self.src, self.indptr), shape=(self.n_nodes, self.n_nodes))

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def permuted(self, perm) -> "Graph":
        """Graph with node ``i`` renamed ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        return Graph.from_edges(self.n_nodes, perm[self.edges])

    def is_forest(self) -> bool:
        parent = np.arange(self.n_nodes)

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in self.edges:
            ra, rb = find(a), find(b)
            if ra == rb:
                return False
            parent[ra] = rb
        return True


def random_tree(n_nodes: int, rng: np.random.Generator) -> Graph:
    """Uniform random recursive tree, with node labels shuffled."""
    if n_nodes < 1:
        raise InvalidParameterError("a tree needs at least one node")
    parents = np.array([rng.integers(0, i) for i in range(1, n_nodes)], dtype=np.int64)
    children = np.arange(1, n_nodes, dtype=np.int64)
    perm = rng.permutation(n_nodes)
    return Graph.from_edges(n_nodes, perm[np.stack([parents, children], axis=1)])
