"""Seeded planted-preference generator for multi-behavior funnels.

Users and items get latent vectors. Target-behavior events are drawn without
replacement from a softmax over user-item affinities. The first behavior
contains every target event plus extra draws from a flatter softmax. Each
intermediate behavior keeps target events with probability ``1 - r_u``, where
the per-user dropout rate ``r_u`` is Beta-distributed around ``dropout``, so
many users skip the intermediate steps altogether.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from ..dataio import RawEvent, Dataset, preprocess


@dataclass
class SyntheticSpec:
    num_users: int = 500
    num_items: int = 800
    behaviors: List[str] = field(default_factory=lambda: ["click", "cart", "purchase"])
    latent_dim: int = 8
    target_per_user: float = 14.0
    click_extra_ratio: float = 2.0
    affinity_temperature: float = 0.6
    click_noise_temperature: float = 1.5
    popularity_scale: float = 0.5
    dropout: float = 0.5
    dropout_concentration: float = 4.0
    horizon: int = 1_000_000

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic keys: {sorted(unknown)}")
        return cls(**d)


def _gumbel_topk(logits: np.ndarray, k: int, rng) -> np.ndarray:
    g = logits - np.log(-np.log(rng.uniform(size=logits.shape)))
    return np.argpartition(-g, k - 1)[:k] if k > 0 else np.zeros(0, dtype=np.int64)


def generate_events(spec: SyntheticSpec, seed: int) -> List[RawEvent]:
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((spec.num_users, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    V = rng.standard_normal((spec.num_items, spec.latent_dim))
    pop = spec.popularity_scale * rng.standard_normal(spec.num_items)
    affinity = U @ V.T + pop
    first, target = spec.behaviors[0], spec.behaviors[-1]
    middle = spec.behaviors[1:-1]
    mean = spec.dropout
    c = spec.dropout_concentration
    events = []
    for u in range(spec.num_users):
        uid = f"u{u}"
        n_target = int(np.clip(rng.poisson(spec.target_per_user), 2, spec.num_items // 4))
        bought = _gumbel_topk(affinity[u] / spec.affinity_temperature, n_target, rng)
        for i in bought:
            events.append(RawEvent(uid, f"i{i}", target, int(rng.integers(spec.horizon))))
        if len(spec.behaviors) > 1:
            n_extra = int(round(spec.click_extra_ratio * n_target))
            logits = affinity[u] / spec.click_noise_temperature
            logits[bought] = -np.inf
            extra = _gumbel_topk(logits, n_extra, rng)
            for i in np.concatenate([bought, extra]):
                events.append(RawEvent(uid, f"i{i}", first, int(rng.integers(spec.horizon))))
        if middle:
            if 0.0 < mean < 1.0:
                rate = rng.beta(mean * c, (1 - mean) * c)
            else:
                rate = mean
            for b in middle:
                keep = bought[rng.uniform(size=len(bought)) >= rate]
                for i in keep:
                    events.append(RawEvent(uid, f"i{i}", b, int(rng.integers(spec.horizon))))
    return events


def generate_dataset(spec: SyntheticSpec, seed: int, train_frac: float = 0.8,
                     val_frac: float = 0.1) -> Dataset:
    events = generate_events(spec, seed)
    return preprocess(events, spec.behaviors, 0, 0, train_frac, val_frac)
