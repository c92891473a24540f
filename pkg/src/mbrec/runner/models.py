"""Trainable wrappers sharing one interface: the cascading model and the baselines.

A trainable owns its graphs and sampler and exposes ``init_params``,
``forward``, ``loss_and_grads`` and ``sample``; the training loop in
:mod:`mbrec.runner.trainer` only talks to that interface.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..dataio import Dataset
from ..graph import BehaviorGraph, build_global_graph, graphs_for, propagate_adjoint, propagate
from ..model import ModelConfig, ModelParams, full_forward, init_params
from ..objective import LossBreakdown, TrainBatch, bpr_from_embeddings, bpr_grad, reg_grad, reg_term, total_loss
from ..optim import EMBEDDING_TABLES, BatchSampler, Gradients, backward


class CascadeModel:
    """The full multi-behavior model with its ablation switches."""

    name = "cascade"

    def __init__(self, mcfg: ModelConfig, dataset: Dataset, dtype=np.float32,
                 sampling_mode: str = "uniform_per_behavior", full_pool: bool = False):
        self.config = mcfg
        self.dataset = dataset
        self.dtype = np.dtype(dtype)
        per, glob = graphs_for(dataset, mcfg.behaviors)
        self.graphs = [g.astype(self.dtype) for g in per]
        self.global_graph = glob.astype(self.dtype)
        self.sampler = BatchSampler(dataset, mcfg.behaviors, mode=sampling_mode)
        self.full_pool = full_pool

    @property
    def behaviors(self) -> List[str]:
        return self.config.behaviors

    def init_params(self, seed: int) -> ModelParams:
        return init_params(self.config, self.dataset.num_users, self.dataset.num_items,
                           seed, dtype=self.dtype)

    def forward(self, params: ModelParams):
        return full_forward(params, self.graphs, self.global_graph, self.config)

    def loss_and_grads(self, params, batch, lam, beta, tau) -> Tuple[LossBreakdown, Gradients]:
        state = self.forward(params)
        lb = total_loss(state, params, batch, lam, beta, tau, self.full_pool)
        return lb, backward(state, params, batch, lam, beta, tau, self.full_pool)

    def steps_per_epoch(self, batch_size: int) -> int:
        return self.sampler.steps_per_epoch(batch_size)

    def sample(self, batch_size, rng) -> TrainBatch:
        return self.sampler.sample(batch_size, rng)


@dataclass
class SharedState:
    """Forward result of a single-embedding baseline, scored for every behavior."""

    users: np.ndarray
    items: np.ndarray
    num_behaviors: int

    @property
    def final(self):
        return [(self.users, self.items)] * self.num_behaviors


class _Pooled:
    """Minimal dataset view with every behavior's training edges merged."""

    def __init__(self, dataset: Dataset, behaviors: Sequence[str]):
        merged = np.unique(np.concatenate([dataset.train[b] for b in behaviors]), axis=0)
        self.behaviors = ["all"]
        self.train = {"all": merged}
        self.num_users = dataset.num_users
        self.num_items = dataset.num_items


class UnifiedLightGCN:
    """Behavior-agnostic LightGCN on the pooled graph; zero layers gives MF-BPR.

    Layer outputs are averaged (layer 0 included) and the same embeddings score
    every behavior. Training uses BPR on pooled edges plus the same embedding
    regularizer as the main model.
    """

    def __init__(self, dataset: Dataset, behaviors: Sequence[str], dim: int, layers: int,
                 dtype=np.float32):
        self.dataset = dataset
        self._behaviors = list(behaviors)
        self.dim = dim
        self.layers = int(layers)
        self.dtype = np.dtype(dtype)
        pooled = _Pooled(dataset, behaviors)
        self.graph: BehaviorGraph = build_global_graph([pooled.train["all"]], dataset.num_users,
                                                       dataset.num_items).astype(self.dtype)
        self.sampler = BatchSampler(pooled, ["all"])
        self.name = "mf_bpr" if self.layers == 0 else "unified_lightgcn"

    @property
    def behaviors(self) -> List[str]:
        return self._behaviors

    def init_params(self, seed: int) -> ModelParams:
        cfg = ModelConfig(dim=self.dim, behaviors=["all"], layers=[1])
        full = init_params(cfg, self.dataset.num_users, self.dataset.num_items, seed, self.dtype)
        t = OrderedDict((n, full[n]) for n in EMBEDDING_TABLES)
        return ModelParams(t, self.dataset.num_users, self.dataset.num_items, self.dim,
                           self._behaviors)

    def forward(self, params: ModelParams) -> SharedState:
        layers = propagate(self.graph, params["P"], params["Q"], self.layers)
        w = 1.0 / (self.layers + 1)
        u = sum(x[0] for x in layers) * w
        i = sum(x[1] for x in layers) * w
        return SharedState(u.astype(self.dtype, copy=False), i.astype(self.dtype, copy=False),
                           len(self._behaviors))

    def loss_and_grads(self, params, batch: TrainBatch, lam, beta, tau):
        state = self.forward(params)
        trip = batch.triples[0]
        bpr = bpr_from_embeddings(state.users, state.items, trip)
        reg = reg_term(params, batch)
        lb = LossBreakdown([bpr], 0.0, 0.0, reg, bpr + beta * reg)
        du, di = bpr_grad(state.users, state.items, trip)
        w = 1.0 / (self.layers + 1)
        dP, dQ = du * w, di * w
        cu, ci = du, di
        for _ in range(self.layers):
            cu, ci = propagate_adjoint(self.graph, cu, ci, 1)
            dP += cu * w
            dQ += ci * w
        if beta:
            rg = reg_grad(params, batch)
            dP += beta * rg["P"]
            dQ += beta * rg["Q"]
        dense = OrderedDict(P=dP.astype(self.dtype, copy=False), Q=dQ.astype(self.dtype, copy=False))
        rows = {n: np.flatnonzero(np.any(dense[n] != 0, axis=1)) for n in EMBEDDING_TABLES}
        return lb, Gradients(dense, rows)

    def steps_per_epoch(self, batch_size: int) -> int:
        return self.sampler.steps_per_epoch(batch_size)

    def sample(self, batch_size, rng) -> TrainBatch:
        return self.sampler.sample(batch_size, rng)
