"""Transaction graph storage and the symmetric-normalized adjacency.

The graph is an immutable multigraph: parallel transaction edges are kept
(each with its own dense edge id), node ids are dense ``0..n-1``.  For the
GCN the directed multigraph is collapsed to an undirected, binary structure
with self-loops, and every stored entry ``(i, j)`` of the normalized
adjacency equals ``1 / sqrt(d_i * d_j)`` where ``d`` counts the
self-loop-augmented structural degree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Structurally invalid graph input."""


@dataclass(frozen=True)
class Graph:
    """Immutable multigraph; edge ids are positions in the input order."""

    node_count: int
    src: np.ndarray
    dst: np.ndarray
    directed: bool = True

    @property
    def edge_count(self) -> int:
        return int(self.src.shape[0])

    def edges(self) -> list[tuple[int, int, int]]:
        """Edge list as (source, target, edge id) tuples."""
        return [(int(s), int(t), i) for i, (s, t) in enumerate(zip(self.src, self.dst))]


def build_graph(edge_list, node_count: int, directed: bool = True) -> Graph:
    """Build a Graph from (source, target) pairs, validating endpoints.

    Raises GraphError naming the first offending edge index if an endpoint
    falls outside ``0..node_count-1``.
    """
    if node_count < 0:
        raise GraphError(f"node_count must be non-negative, got {node_count}")
    edge_arr = np.asarray(list(edge_list), dtype=np.int64)
    if edge_arr.size == 0:
        edge_arr = edge_arr.reshape(0, 2)
    if edge_arr.ndim != 2 or edge_arr.shape[1] != 2:
        raise GraphError("edge_list must contain (source, target) pairs")
    src, dst = edge_arr[:, 0].copy(), edge_arr[:, 1].copy()
    bad = np.nonzero((src < 0) | (src >= node_count) | (dst < 0) | (dst >= node_count))[0]
    if bad.size:
        i = int(bad[0])
        raise GraphError(
            f"edge {i} has endpoint outside 0..{node_count - 1}: "
            f"({int(src[i])}, {int(dst[i])})"
        )
    src.setflags(write=False)
    dst.setflags(write=False)
    return Graph(node_count=node_count, src=src, dst=dst, directed=directed)


@dataclass
class NormalizedAdjacency:
    """Symmetric normalized adjacency with self-loops, in CSR layout.

    Immutable after construction apart from ``product_count``, an
    instrumentation counter of sparse-dense products taken against it.
    """

    matrix: sp.csr_matrix
    node_count: int
    product_count: int = field(default=0, compare=False)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(g: Graph) -> NormalizedAdjacency:
    """Compute D^{-1/2} (A + I) D^{-1/2} for the undirected binary collapse.

    Parallel edges collapse to one structural entry; direction is ignored;
    every node receives a self-loop, so isolated nodes get a 1.0 diagonal.
    """
    n = g.node_count
    if n < 1:
        raise GraphError("normalized adjacency requires at least one node")
    loops = np.arange(n, dtype=np.int64)
    rows = np.concatenate([g.src, g.dst, loops])
    cols = np.concatenate([g.dst, g.src, loops])
    a = sp.csr_matrix(
        (np.ones(rows.shape[0], dtype=np.float64), (rows, cols)), shape=(n, n)
    )
    a.data[:] = 1.0  # collapse duplicate entries created by parallel edges
    degree = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(degree)
    coo = a.tocoo()
    values = inv_sqrt[coo.row] * inv_sqrt[coo.col]
    norm = sp.csr_matrix((values, (coo.row, coo.col)), shape=(n, n))
    norm.sort_indices()
    return NormalizedAdjacency(matrix=norm, node_count=n)


def spmm(adj: NormalizedAdjacency, dense: np.ndarray) -> np.ndarray:
    """Sparse-dense product ``adj @ dense`` with row-major accumulation.

    scipy's CSR kernel walks stored entries row by row in index order, so
    repeated calls are bit-reproducible.
    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2 or dense.shape[0] != adj.node_count:
        raise GraphError(
            f"dense operand must be 2-d with {adj.node_count} rows, "
            f"got shape {dense.shape}"
        )
    adj.product_count += 1
    return adj.matrix @ dense


def feature_matrix(values, expected_rows: int | None = None) -> np.ndarray:
    """Validate and return a dense float64 feature matrix.

    All entries must be finite; ``expected_rows`` pins the matrix to its
    owning entity count (nodes or edges).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise GraphError(f"feature matrix must be 2-d, got shape {arr.shape}")
    if expected_rows is not None and arr.shape[0] != expected_rows:
        raise GraphError(
            f"feature matrix has {arr.shape[0]} rows, expected {expected_rows}"
        )
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise GraphError(f"non-finite feature value at row {bad[0]}, column {bad[1]}")
    return arr
