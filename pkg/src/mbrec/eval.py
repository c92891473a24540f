"""Full-ranking top-K evaluation: Prec, Rec, NDCG and HR per behavior."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

METRICS = ("prec", "rec", "ndcg", "hr")
DEFAULT_CUTOFFS = (5, 10, 15)


@dataclass
class MetricReport:
    """``values[behavior][K][metric]``; behaviors with no evaluable user map to None."""

    behaviors: List[str]
    cutoffs: List[int]
    values: Dict[str, Optional[Dict[int, Dict[str, float]]]]
    num_users: Dict[str, int] = field(default_factory=dict)

    def get(self, behavior: str, metric: str, k: int) -> Optional[float]:
        per = self.values.get(behavior)
        return None if per is None else per[k][metric]

    def lines(self, prefix: str = "") -> List[str]:
        """Machine-readable ``behavior.metric@K=value`` lines."""
        out = []
        for b in self.behaviors:
            per = self.values[b]
            if per is None:
                continue
            for k in self.cutoffs:
                for m in METRICS:
                    out.append(f"{prefix}{b}.{m}@{k}={per[k][m]:.6f}")
        return out

    def table(self) -> str:
        cols = [f"{m}@{k}" for k in self.cutoffs for m in METRICS]
        width = max(8, max(len(b) for b in self.behaviors))
        head = f"{'behavior'.ljust(width)}  {'users':>6}  " + "  ".join(c.rjust(9) for c in cols)
        rows = [head, "-" * len(head)]
        for b in self.behaviors:
            per = self.values[b]
            if per is None:
                cells = ["absent".rjust(9)] * len(cols)
            else:
                cells = [f"{per[k][m]:9.4f}" for k in self.cutoffs for m in METRICS]
            rows.append(f"{b.ljust(width)}  {self.num_users.get(b, 0):>6}  " + "  ".join(cells))
        return "\n".join(rows)


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def rank_topk(scores: np.ndarray, k: int, exclude: Iterable[int] = ()) -> np.ndarray:
    """Indices of the ``k`` highest scores; ties go to the lower index.

    Excluded items never appear; fewer than ``k`` are returned when the
    candidate set is smaller.
    """
    s = np.asarray(scores, dtype=np.float64).copy()
    exclude = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude
    if len(exclude):
        s[exclude] = -np.inf
    n_avail = len(s) - len(np.unique(exclude))
    k = min(k, n_avail)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    kth = np.partition(s, len(s) - k)[len(s) - k]
    cand = np.flatnonzero(s >= kth)
    order = np.lexsort((cand, -s[cand]))
    return cand[order[:k]]


def metrics_for_user(ranked: Sequence[int], ground_truth, k: int):
    """``(prec, rec, ndcg, hr)`` of one ranked list truncated at ``k``."""
    gt = set(ground_truth)
    if not gt:
        raise ValueError("empty ground truth")
    ranked = list(ranked)[:k]
    hit_ranks = [r for r, item in enumerate(ranked, start=1) if item in gt]
    hits = len(hit_ranks)
    dcg = sum(1.0 / math.log2(r + 1) for r in hit_ranks)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(gt)) + 1))
    return hits / k, hits / len(gt), dcg / idcg, 1.0 if hits else 0.0


def _group(edges: np.ndarray, num_users: int):
    """CSR-style grouping of ``(user, item)`` rows by user."""
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    indptr = np.zeros(num_users + 1, dtype=np.int64)
    np.add.at(indptr, e[:, 0] + 1, 1)
    return np.cumsum(indptr), e[:, 1]


def evaluate_embeddings(final, dataset, split: str, cutoffs: Sequence[int] = DEFAULT_CUTOFFS,
                        behaviors: Optional[Sequence[str]] = None,
                        chunk: int = 1024) -> MetricReport:
    """Evaluate per-behavior ``(users, items)`` embedding pairs.

    ``final[k]`` scores behavior ``behaviors[k]``. Candidates are all items
    except the user's training positives under the same behavior.
    """
    behaviors = list(behaviors or dataset.behaviors)
    cutoffs = sorted(int(c) for c in cutoffs)
    kmax = max(cutoffs)
    disc = _discounts(kmax)
    idcg_table = np.concatenate([[1.0], np.cumsum(disc)])
    values: Dict[str, Optional[Dict[int, Dict[str, float]]]] = {}
    counts: Dict[str, int] = {}
    M = dataset.num_users
    for k, b in enumerate(behaviors):
        gt_edges = dataset.split(split)[b]
        users = np.unique(gt_edges[:, 0]) if len(gt_edges) else np.zeros(0, np.int64)
        counts[b] = len(users)
        if len(users) == 0:
            values[b] = None
            continue
        gt_ptr, gt_items = _group(gt_edges, M)
        tr_ptr, tr_items = _group(dataset.train[b], M)
        U, I = final[k]
        sums = {c: dict.fromkeys(METRICS, 0.0) for c in cutoffs}
        for start in range(0, len(users), chunk):
            batch = users[start:start + chunk]
            scores = np.asarray(U[batch] @ I.T, dtype=np.float64)
            for row, u in enumerate(batch):
                ex = tr_items[tr_ptr[u]:tr_ptr[u + 1]]
                if len(ex):
                    scores[row, ex] = -np.inf
            top = _topk_rows(scores, kmax, np.array([tr_ptr[u + 1] - tr_ptr[u] for u in batch]))
            for row, u in enumerate(batch):
                gt = gt_items[gt_ptr[u]:gt_ptr[u + 1]]
                ranked = top[row]
                hits = np.isin(ranked, gt)
                for c in cutoffs:
                    h = hits[:c]
                    nh = int(h.sum())
                    s = sums[c]
                    s["prec"] += nh / c
                    s["rec"] += nh / len(gt)
                    s["hr"] += 1.0 if nh else 0.0
                    s["ndcg"] += float(disc[:len(h)][h].sum()) / idcg_table[min(c, len(gt))]
        values[b] = {c: {m: sums[c][m] / len(users) for m in METRICS} for c in cutoffs}
    return MetricReport(behaviors, cutoffs, values, counts)


def _topk_rows(scores: np.ndarray, k: int, n_excluded: np.ndarray):
    """Row-wise :func:`rank_topk` on an already-masked score matrix."""
    n = scores.shape[1]
    kk = min(k, n)
    kth = np.partition(scores, n - kk, axis=1)[:, n - kk]
    out = []
    for row in range(scores.shape[0]):
        s = scores[row]
        cand = np.flatnonzero(s >= kth[row])
        cand = cand[np.isfinite(s[cand])]
        order = np.lexsort((cand, -s[cand]))
        out.append(cand[order[: min(k, n - n_excluded[row])]])
    return out


def evaluate(state, dataset, split: str, cutoffs: Sequence[int] = DEFAULT_CUTOFFS) -> MetricReport:
    """Evaluate a forward state (anything exposing ``.final``) on ``val`` or ``test``."""
    if split not in ("val", "test"):
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    final = state.final if hasattr(state, "final") else state
    return evaluate_embeddings(final, dataset, split, cutoffs)


def early_stop_signal(report: MetricReport, k: int = 5) -> float:
    """Sum over behaviors of NDCG@k; absent behaviors contribute nothing."""
    total = 0.0
    for b in report.behaviors:
        v = report.get(b, "ndcg", k)
        if v is not None:
            total += v
    return total


def random_ranking_ndcg(gt_sizes: Sequence[int], n_candidates: Sequence[int], k: int = 5) -> float:
    """Expected NDCG@k of a uniformly random ranking, averaged over users.

    Each rank holds a ground-truth item with probability ``|GT| / n_candidates``.
    """
    disc = _discounts(k)
    vals = []
    for g, n in zip(gt_sizes, n_candidates):
        p = min(g / n, 1.0)
        vals.append(p * disc[:min(k, n)].sum() / disc[:min(k, g)].sum())
    return float(np.mean(vals)) if vals else 0.0
