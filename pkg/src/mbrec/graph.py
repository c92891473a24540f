"""Symmetric-normalized bipartite user-item graphs and one-layer propagation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorGraph:
    """Normalized adjacency stored twice: ``adj`` (users x items) and its transpose.

    Edge ``(u, i)`` carries ``1 / sqrt(deg(u) * deg(i))`` with degrees taken in
    this graph. Rows of both CSR matrices have sorted, unique column indices.
    """

    name: str
    num_users: int
    num_items: int
    adj: sp.csr_matrix
    adj_t: sp.csr_matrix
    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.adj.nnz)

    def user_neighbors(self, u: int):
        lo, hi = self.adj.indptr[u], self.adj.indptr[u + 1]
        return self.adj.indices[lo:hi], self.adj.data[lo:hi]

    def item_neighbors(self, i: int):
        lo, hi = self.adj_t.indptr[i], self.adj_t.indptr[i + 1]
        return self.adj_t.indices[lo:hi], self.adj_t.data[lo:hi]

    def dense(self) -> np.ndarray:
        return self.adj.toarray()

    def astype(self, dtype) -> "BehaviorGraph":
        if self.adj.dtype == dtype:
            return self
        return BehaviorGraph(self.name, self.num_users, self.num_items,
                             self.adj.astype(dtype), self.adj_t.astype(dtype),
                             self.user_degrees, self.item_degrees)


def build_graph(edges, num_users: int, num_items: int, name: str = "") -> BehaviorGraph:
    """Build a graph from ``(user, item)`` pairs; duplicate pairs count once."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges):
        bad_u = (edges[:, 0] < 0) | (edges[:, 0] >= num_users)
        bad_i = (edges[:, 1] < 0) | (edges[:, 1] >= num_items)
        if bad_u.any() or bad_i.any():
            row = edges[np.argmax(bad_u | bad_i)]
            raise GraphError(f"edge {tuple(row.tolist())} out of range for "
                             f"{num_users} users x {num_items} items")
        edges = np.unique(edges, axis=0)
    users, items = edges[:, 0], edges[:, 1]
    du = np.bincount(users, minlength=num_users)
    di = np.bincount(items, minlength=num_items)
    coef = 1.0 / np.sqrt(du[users].astype(np.float64) * di[items])
    adj = sp.csr_matrix((coef, (users, items)), shape=(num_users, num_items))
    adj.sort_indices()
    adj_t = adj.T.tocsr()
    adj_t.sort_indices()
    return BehaviorGraph(name, num_users, num_items, adj, adj_t, du, di)


def build_global_graph(edge_sets: Iterable[np.ndarray], num_users: int,
                       num_items: int) -> BehaviorGraph:
    """Union (not multiset) of several behaviors' edges."""
    stacked = [np.asarray(e, dtype=np.int64).reshape(-1, 2) for e in edge_sets]
    edges = np.concatenate(stacked) if stacked else np.zeros((0, 2), dtype=np.int64)
    return build_graph(edges, num_users, num_items, name="global")


def _as_dtype(g_mat: sp.csr_matrix, x: np.ndarray) -> sp.csr_matrix:
    return g_mat if g_mat.dtype == x.dtype else g_mat.astype(x.dtype)


def propagate_users(graph: BehaviorGraph, item_embeddings: np.ndarray) -> np.ndarray:
    """Row ``u`` = sum over item neighbors of ``coef(u, i) * item_embeddings[i]``."""
    x = np.asarray(item_embeddings)
    return np.asarray(_as_dtype(graph.adj, x) @ x)


def propagate_items(graph: BehaviorGraph, user_embeddings: np.ndarray) -> np.ndarray:
    """Transpose of :func:`propagate_users`."""
    x = np.asarray(user_embeddings)
    return np.asarray(_as_dtype(graph.adj_t, x) @ x)


def propagate(graph: BehaviorGraph, user_emb: np.ndarray, item_emb: np.ndarray,
              layers: int) -> list:
    """Run ``layers`` simultaneous propagation steps and return every layer.

    Element ``l`` of the result is ``(users_l, items_l)``; element 0 is the input.
    """
    out = [(user_emb, item_emb)]
    u, i = user_emb, item_emb
    for _ in range(layers):
        u, i = propagate_users(graph, i), propagate_items(graph, u)
        out.append((u, i))
    return out


def propagate_adjoint(graph: BehaviorGraph, grad_users: np.ndarray,
                      grad_items: np.ndarray, layers: int):
    """Pull cotangents of the last propagated layer back to the input layer."""
    du, di = grad_users, grad_items
    for _ in range(layers):
        du, di = propagate_users(graph, di), propagate_items(graph, du)
    return du, di


def spectral_norm_estimate(graph: BehaviorGraph, iters: int = 200, seed: int = 0) -> float:
    """Largest singular value of the normalized operator by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(graph.num_items)
    x /= np.linalg.norm(x) or 1.0
    sigma = 0.0
    for _ in range(iters):
        y = graph.adj_t @ (graph.adj @ x)
        n = np.linalg.norm(y)
        if n == 0:
            return 0.0
        sigma = np.sqrt(n)
        x = y / n
    return float(sigma)


def graphs_for(dataset, behaviors: Sequence[str] = None):
    """Per-behavior training graphs plus the all-behavior global graph."""
    behaviors = list(behaviors or dataset.behaviors)
    per = [build_graph(dataset.train[b], dataset.num_users, dataset.num_items, name=b)
           for b in behaviors]
    glob = build_global_graph([dataset.train[b] for b in behaviors],
                              dataset.num_users, dataset.num_items)
    return per, glob
