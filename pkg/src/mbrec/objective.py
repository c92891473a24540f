"""Joint training objective: per-behavior BPR, contrastive alignment, L2 penalty.

Each loss has a ``*_grad`` companion returning cotangents with respect to the
embeddings it reads; :mod:`mbrec.optim` chains those through the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import (ForwardState, ModelParams, l2_normalize_backward,
                    l2_normalize_rows, sigmoid)


class LossError(RuntimeError):
    pass


@dataclass
class TrainBatch:
    """Sampled ``(user, pos_item, neg_item)`` rows per behavior index."""

    triples: Dict[int, np.ndarray]
    cpa_users: np.ndarray
    cpa_items: np.ndarray
    batch_size: int

    @classmethod
    def from_triples(cls, triples: Dict[int, np.ndarray], target: int,
                     batch_size: Optional[int] = None) -> "TrainBatch":
        triples = {k: np.asarray(v, dtype=np.int64).reshape(-1, 3) for k, v in triples.items()}
        tgt = triples.get(target, np.zeros((0, 3), dtype=np.int64))
        if batch_size is None:
            batch_size = max((len(v) for v in triples.values()), default=1)
        return cls(triples, np.unique(tgt[:, 0]), np.unique(tgt[:, 1]), max(int(batch_size), 1))


@dataclass
class LossBreakdown:
    bpr: List[float]
    cl_user: float
    cl_item: float
    reg: float
    total: float
    weights: Dict[str, float] = field(default_factory=dict)

    def as_dict(self, behaviors=None) -> Dict[str, float]:
        names = behaviors or [str(k) for k in range(len(self.bpr))]
        out = {f"bpr.{n}": v for n, v in zip(names, self.bpr)}
        out.update(cl_user=self.cl_user, cl_item=self.cl_item, reg=self.reg, total=self.total)
        return out


# --------------------------------------------------------------------------
# BPR


def bpr_from_embeddings(users: np.ndarray, items: np.ndarray, triples: np.ndarray) -> float:
    if len(triples) == 0:
        return 0.0
    u, i, j = triples[:, 0], triples[:, 1], triples[:, 2]
    eu = users[u]
    diff = np.einsum("nd,nd->n", eu, items[i] - items[j])
    # -ln sigmoid(x) = softplus(-x)
    return float(np.logaddexp(0.0, -diff.astype(np.float64)).sum())


def bpr_grad(users: np.ndarray, items: np.ndarray, triples: np.ndarray):
    """Cotangents of the summed BPR loss w.r.t. the full user/item tables."""
    du = np.zeros_like(users)
    di = np.zeros_like(items)
    if len(triples) == 0:
        return du, di
    u, i, j = triples[:, 0], triples[:, 1], triples[:, 2]
    eu = users[u]
    diff = np.einsum("nd,nd->n", eu, items[i] - items[j])
    coef = (-sigmoid(-diff))[:, None].astype(users.dtype)
    np.add.at(du, u, coef * (items[i] - items[j]))
    np.add.at(di, i, coef * eu)
    np.add.at(di, j, -coef * eu)
    return du, di


def bpr_loss(state: ForwardState, batch: TrainBatch, k: int) -> float:
    users, items = state.final[k]
    return bpr_from_embeddings(users, items, batch.triples.get(k, np.zeros((0, 3), np.int64)))


# --------------------------------------------------------------------------
# contrastive alignment


def infonce_side(anchor_table: np.ndarray, global_table: np.ndarray, anchors: np.ndarray,
                 pool: np.ndarray, tau: float, eps: float, with_grad: bool = False):
    """Summed InfoNCE of ``anchor_table[a]`` against ``global_table[pool]``.

    Every anchor must occur in ``pool``; its own global row is the positive.
    Returns the loss, and with ``with_grad`` also dense cotangents for both tables.
    """
    if len(anchors) == 0:
        if with_grad:
            return 0.0, np.zeros_like(anchor_table), np.zeros_like(global_table)
        return 0.0
    pos = np.searchsorted(pool, anchors)
    if np.any(pos >= len(pool)) or np.any(pool[np.minimum(pos, len(pool) - 1)] != anchors):
        raise LossError("every anchor must belong to the negative pool")
    a, na = l2_normalize_rows(anchor_table[anchors], eps)
    b, nb = l2_normalize_rows(global_table[pool], eps)
    logits = (a @ b.T) / tau
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    z = ex.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    rows = np.arange(len(anchors))
    loss = float((lse - logits[rows, pos]).astype(np.float64).sum())
    if not with_grad:
        return loss
    dlogits = ex / z
    dlogits[rows, pos] -= 1.0
    dlogits /= tau
    da = l2_normalize_backward(a, na, dlogits @ b, eps)
    db = l2_normalize_backward(b, nb, dlogits.T @ a, eps)
    d_anchor = np.zeros_like(anchor_table)
    d_global = np.zeros_like(global_table)
    np.add.at(d_anchor, anchors, da)
    np.add.at(d_global, pool, db)
    return loss, d_anchor, d_global


def cpa_pools(batch: TrainBatch, num_users: int, num_items: int, full_pool: bool):
    if full_pool:
        return np.arange(num_users), np.arange(num_items)
    return batch.cpa_users, batch.cpa_items


def cpa_loss(state: ForwardState, batch: TrainBatch, tau: float,
             full_pool: bool = False) -> Tuple[float, float]:
    """User- and item-side alignment of target embeddings with global embeddings."""
    if tau <= 0:
        raise LossError(f"temperature must be positive, got {tau}")
    if not state.config.enable_cpa:
        return 0.0, 0.0
    eps = state.config.norm_epsilon
    tu, ti = state.final[-1]
    gu, gi = state.global_emb
    pool_u, pool_i = cpa_pools(batch, len(tu), len(ti), full_pool)
    lu = infonce_side(tu, gu, batch.cpa_users, pool_u, tau, eps)
    li = infonce_side(ti, gi, batch.cpa_items, pool_i, tau, eps)
    return lu, li


# --------------------------------------------------------------------------
# regularization


def batch_rows(batch: TrainBatch):
    trip = [t for t in batch.triples.values() if len(t)]
    if not trip:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    allt = np.concatenate(trip)
    users = np.unique(np.concatenate([allt[:, 0], batch.cpa_users]))
    items = np.unique(np.concatenate([allt[:, 1], allt[:, 2], batch.cpa_items]))
    return users, items


def reg_term(params: ModelParams, batch: TrainBatch) -> float:
    """Squared norm of batch-touched embedding rows / batch size, plus all weight matrices."""
    users, items = batch_rows(batch)
    P, Q = params["P"], params["Q"]
    emb = (np.square(P[users], dtype=np.float64).sum()
           + np.square(Q[items], dtype=np.float64).sum()) / batch.batch_size
    dense = sum(np.square(params[n], dtype=np.float64).sum() for n in params.weight_matrix_names())
    return float(emb + dense)


def reg_grad(params: ModelParams, batch: TrainBatch) -> Dict[str, np.ndarray]:
    users, items = batch_rows(batch)
    out = {}
    dP = np.zeros_like(params["P"])
    dQ = np.zeros_like(params["Q"])
    dP[users] = 2.0 * params["P"][users] / batch.batch_size
    dQ[items] = 2.0 * params["Q"][items] / batch.batch_size
    out["P"], out["Q"] = dP, dQ
    for n in params.weight_matrix_names():
        out[n] = 2.0 * params[n]
    return out


# --------------------------------------------------------------------------
# total


def total_loss(state: ForwardState, params: ModelParams, batch: TrainBatch, lam: float,
               beta: float, tau: float, full_pool: bool = False) -> LossBreakdown:
    K = state.config.num_behaviors
    bpr = [bpr_loss(state, batch, k) for k in range(K)]
    cl_u, cl_i = cpa_loss(state, batch, tau, full_pool)
    reg = reg_term(params, batch)
    total = sum(bpr) + lam * (cl_u + cl_i) + beta * reg
    for name, v in [*((f"bpr[{k}]", b) for k, b in enumerate(bpr)),
                    ("cl_user", cl_u), ("cl_item", cl_i), ("reg", reg)]:
        if not np.isfinite(v):
            raise LossError(f"non-finite loss component {name}: {v}")
    return LossBreakdown(bpr, cl_u, cl_i, reg, float(total),
                         {"lambda": lam, "beta": beta, "tau": tau})
