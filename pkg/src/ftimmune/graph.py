"""Attributed graphs, propagation operators and their per-edge decomposition."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np
import scipy.sparse as sp

Edge = tuple[int, int]


class GraphError(ValueError):
    """Raised on malformed graphs or queries for edges the graph does not hold."""


def canonical(u: int, v: int) -> Edge:
    u, v = int(u), int(v)
    return (u, v) if u <= v else (v, u)


class LaplacianKind(str, enum.Enum):
    SYM = "sym_normalized_with_self_loops"
    ROW = "row_normalized"
    UNNORMALIZED = "unnormalized"


@dataclass(frozen=True, eq=False)
class GraphData:
    """Undirected attributed graph with node splits.

    ``edges`` holds canonical ``(min, max)`` pairs and never self-pairs.
    ``labels`` is one-hot (N x C). The reliable mask marks the trusted region
    and may overlap any split.
    """

    num_nodes: int
    edges: frozenset
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    reliable_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        n = int(self.num_nodes)
        canon = frozenset(canonical(u, v) for u, v in self.edges)
        for u, v in canon:
            if u == v:
                raise GraphError(f"self-pair ({u}, {v}) is not allowed")
            if u < 0 or v >= n:
                raise GraphError(f"edge ({u}, {v}) out of range for {n} nodes")
        object.__setattr__(self, "edges", canon)
        feats = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=float)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise GraphError(f"features must be {n} x d, got {feats.shape}")
        if labels.ndim != 2 or labels.shape[0] != n:
            raise GraphError(f"labels must be {n} x C, got {labels.shape}")
        if not np.all((labels == 0) | (labels == 1)) or not np.all(labels.sum(axis=1) == 1):
            raise GraphError("labels must be one-hot rows")
        masks = {}
        for name in ("train_mask", "val_mask", "test_mask", "reliable_mask"):
            m = getattr(self, name)
            m = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
            if m.shape != (n,):
                raise GraphError(f"{name} must have length {n}")
            m = m.copy()
            m.setflags(write=False)
            masks[name] = m
        if (masks["train_mask"] & masks["val_mask"]).any() or \
                (masks["train_mask"] & masks["test_mask"]).any() or \
                (masks["val_mask"] & masks["test_mask"]).any():
            raise GraphError("train/val/test masks must be disjoint")
        for name, m in masks.items():
            object.__setattr__(self, name, m)
        feats = feats.copy()
        feats.setflags(write=False)
        labels = labels.copy()
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def label_ids(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def sorted_edges(self) -> list[Edge]:
        return sorted(self.edges)

    def edge_array(self) -> np.ndarray:
        """Canonical edges as an (E, 2) int array in sorted order."""
        if not self.edges:
            return np.zeros((0, 2), dtype=int)
        return np.array(self.sorted_edges(), dtype=int)

    def adjacency(self) -> sp.csr_matrix:
        e = self.edge_array()
        n = self.num_nodes
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=int)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.sorted_edges():
            nbrs[u].append(v)
            nbrs[v].append(u)
        return nbrs

    def has_edge(self, u: int, v: int) -> bool:
        return canonical(u, v) in self.edges

    def with_edges(self, edges: Iterable[Edge]) -> "GraphData":
        return replace(self, edges=frozenset(canonical(u, v) for u, v in edges))

    def with_reliable(self, mask: np.ndarray) -> "GraphData":
        return replace(self, reliable_mask=np.asarray(mask, dtype=bool))

    def reliable_edges(self) -> set[Edge]:
        """Edges with both endpoints inside the reliable region."""
        r = self.reliable_mask
        return {e for e in self.edges if r[e[0]] and r[e[1]]}

    def same_as(self, other: "GraphData") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and self.edges == other.edges
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and all(
                np.array_equal(getattr(self, m), getattr(other, m))
                for m in ("train_mask", "val_mask", "test_mask", "reliable_mask")
            )
        )


@dataclass(frozen=True)
class EdgeContribution:
    """Share of a propagation operator owned by one edge (or one self-loop)."""

    edge: Edge
    matrix: sp.csr_matrix


def build_laplacian(g: GraphData, kind: LaplacianKind = LaplacianKind.SYM) -> sp.csr_matrix:
    """Propagation operator of ``g``.

    ``SYM`` is the usual GCN operator D~^-1/2 (A + I) D~^-1/2, ``ROW`` is
    D~^-1 (A + I) and ``UNNORMALIZED`` is the combinatorial D - A.
    """
    kind = LaplacianKind(kind)
    n = g.num_nodes
    a = g.adjacency()
    if kind is LaplacianKind.UNNORMALIZED:
        deg = np.asarray(a.sum(axis=1)).ravel()
        return (sp.diags(deg) - a).tocsr()
    a_tilde = (a + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    if kind is LaplacianKind.SYM:
        d = sp.diags(1.0 / np.sqrt(deg))
        lap = d @ a_tilde @ d
    else:
        lap = sp.diags(1.0 / deg) @ a_tilde
    return sp.csr_matrix(lap)


def reduced_laplacian(L: sp.spmatrix, g: GraphData, edge: Edge) -> EdgeContribution:
    """Single-edge share of ``L``.

    An edge owns its two off-diagonal entries; a self-pair ``(i, i)`` owns the
    diagonal entry of ``i``. Summing over every edge and every self-pair gives
    back ``L`` exactly.
    """
    i, j = int(edge[0]), int(edge[1])
    n = g.num_nodes
    L = _as_csr(L)
    if i == j:
        if not 0 <= i < n:
            raise GraphError(f"node {i} out of range")
        return EdgeContribution((i, i), _two_entry(n, [i], [i], [_entry(L, i, i)]))
    if not g.has_edge(i, j):
        raise GraphError(f"edge ({i}, {j}) is not in the graph")
    return EdgeContribution(canonical(i, j), _two_entry(n, [i, j], [j, i], [_entry(L, i, j), _entry(L, j, i)]))


def _as_csr(L: sp.spmatrix) -> sp.csr_matrix:
    if not sp.isspmatrix_csr(L):
        L = sp.csr_matrix(L)
    if not L.has_sorted_indices:
        L = L.sorted_indices()
    return L


def _entry(L: sp.csr_matrix, i: int, j: int) -> float:
    # scipy scalar indexing is slow; binary search the sorted row instead
    lo, hi = L.indptr[i], L.indptr[i + 1]
    k = lo + int(np.searchsorted(L.indices[lo:hi], j))
    return float(L.data[k]) if k < hi and L.indices[k] == j else 0.0


def _two_entry(n: int, rows: list, cols: list, vals: list) -> sp.csr_matrix:
    order = np.argsort(rows, kind="stable")
    rows, cols, vals = np.asarray(rows)[order], np.asarray(cols)[order], np.asarray(vals, dtype=float)[order]
    indptr = np.zeros(n + 1, dtype=np.int32)
    np.add.at(indptr, rows + 1, 1)
    return sp.csr_matrix((vals, cols.astype(np.int32), np.cumsum(indptr)), shape=(n, n))


def self_loop_contribution(L: sp.spmatrix, g: GraphData, node: int) -> EdgeContribution:
    return reduced_laplacian(L, g, (node, node))


def contribution_sum(L: sp.spmatrix, g: GraphData, edges: Iterable[Edge],
                     include_self_loops: bool = False) -> sp.csr_matrix:
    """Sum of edge shares of ``L`` over ``edges`` (plus every self-loop share)."""
    L = sp.csr_matrix(L)
    n = g.num_nodes
    rows, cols, vals = [], [], []
    for i, j in edges:
        if not g.has_edge(i, j):
            raise GraphError(f"edge ({i}, {j}) is not in the graph")
        rows += [i, j]
        cols += [j, i]
        vals += [L[i, j], L[j, i]]
    if include_self_loops:
        diag = L.diagonal()
        rows += list(range(n))
        cols += list(range(n))
        vals += list(diag)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def cs_subgraph_split(g: GraphData, edge_subset: Iterable[Edge]) -> tuple[GraphData, GraphData]:
    """Split ``g`` into two spanning subgraphs whose edge sets partition ``g.edges``.

    Under the share convention of :func:`reduced_laplacian` the two halves'
    contributions (self-loop shares counted once) add up to ``g``'s operator.
    """
    subset = frozenset(canonical(u, v) for u, v in edge_subset)
    missing = subset - g.edges
    if missing:
        raise GraphError(f"edges not in graph: {sorted(missing)[:5]}")
    return g.with_edges(subset), g.with_edges(g.edges - subset)


def dense(L: sp.spmatrix | np.ndarray) -> np.ndarray:
    return L.toarray() if sp.issparse(L) else np.asarray(L)
