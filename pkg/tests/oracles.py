"""Slow, independent reference implementations used as test oracles.

Nothing here imports the library's numerical code; everything is written with
plain Python loops over dicts and lists so that agreement with the vectorized
implementation is meaningful.
"""

import math
from collections import defaultdict


# --------------------------------------------------------------------------
# preprocessing


def dedup_oracle(events):
    best = {}
    for pos, e in enumerate(events):
        key = (e.user, e.item, e.behavior)
        if key not in best or e.timestamp < best[key][1].timestamp:
            best[key] = (pos, e)
    return [e for _, e in sorted(best.values(), key=lambda pe: pe[0])]


def filter_oracle(events, item_min, user_min, target):
    events = list(events)
    while True:
        before = len(events)
        counts = defaultdict(int)
        for e in events:
            if e.behavior == target:
                counts[e.item] += 1
        events = [e for e in events if counts[e.item] >= item_min]
        counts = defaultdict(int)
        for e in events:
            if e.behavior == target:
                counts[e.user] += 1
        events = [e for e in events if counts[e.user] >= user_min]
        if len(events) == before:
            return events


def split_sizes_oracle(timestamps, train_frac, val_frac):
    """Sort-and-cut: counts of events at or below each boundary timestamp."""
    ts = sorted(timestamps)
    n = len(ts)
    t1 = ts[max(0, math.ceil(train_frac * n) - 1)]
    t2 = ts[max(0, math.ceil((train_frac + val_frac) * n) - 1)]
    n_train = sum(1 for t in ts if t <= t1)
    n_val = sum(1 for t in ts if t1 < t <= t2)
    return n_train, n_val, n - n_train - n_val


# --------------------------------------------------------------------------
# graphs and forward pass


def neighbor_sets(edges):
    nu, ni = defaultdict(set), defaultdict(set)
    for u, i in edges:
        nu[int(u)].add(int(i))
        ni[int(i)].add(int(u))
    return nu, ni


def dense_norm_adj(edges, M, N):
    """D_u^{-1/2} A D_i^{-1/2} as a list-of-lists matrix."""
    nu, ni = neighbor_sets(edges)
    A = [[0.0] * N for _ in range(M)]
    for u in nu:
        for i in nu[u]:
            A[u][i] = 1.0 / math.sqrt(len(nu[u]) * len(ni[i]))
    return A


def matmul(A, X):
    return [[sum(A[r][c] * X[c][j] for c in range(len(X))) for j in range(len(X[0]))]
            for r in range(len(A))]


def transpose(A):
    return [list(col) for col in zip(*A)]


def loop_layer(edges, users, items):
    """One propagation layer written as neighbor loops."""
    nu, ni = neighbor_sets(edges)
    d = len(users[0]) if users else len(items[0])
    new_u = [[0.0] * d for _ in users]
    new_i = [[0.0] * d for _ in items]
    for u in range(len(users)):
        for i in nu.get(u, ()):
            c = 1.0 / math.sqrt(len(nu[u]) * len(ni[i]))
            for j in range(d):
                new_u[u][j] += c * items[i][j]
    for i in range(len(items)):
        for u in ni.get(i, ()):
            c = 1.0 / math.sqrt(len(nu[u]) * len(ni[i]))
            for j in range(d):
                new_i[i][j] += c * users[u][j]
    return new_u, new_i


def unit(row, eps=1e-12):
    n = max(math.sqrt(sum(x * x for x in row)), eps)
    return [x / n for x in row]


def add(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def gate(row, W1, b1, W2, b2, slope=0.01):
    d = len(row)
    h = []
    for r in range(d):
        z = b1[r] + sum(W1[r][c] * row[c] for c in range(d))
        h.append(z if z > 0 else slope * z)
    g = []
    for r in range(d):
        z = b2[r] + sum(W2[r][c] * h[c] for c in range(d))
        g.append(1.0 / (1.0 + math.exp(-z)))
    return g


def affine(row, W, b):
    return [b[r] + sum(W[r][c] * row[c] for c in range(len(row))) for r in range(len(b))]


def naive_forward(tensors, edge_lists, global_edges, layers, global_layers, mode="accumulated",
                  cgf=True, gce=True, share=False):
    """Reference forward pass; ``tensors`` maps parameter names to nested lists.

    Returns ``(final, global)`` with ``final[k] = (users, items)``.
    """
    P, Q = tensors["P"], tensors["Q"]
    K = len(edge_lists)
    sides = ("user", "item")
    cascade = []
    prev = (P, Q)
    for k in range(K):
        u, i = prev if (k > 0 and mode == "accumulated") else (P, Q)
        for _ in range(layers[k]):
            u, i = loop_layer(edge_lists[k], u, i)
        out = (add(prev[0], [unit(r) for r in u]), add(prev[1], [unit(r) for r in i]))
        cascade.append(out)
        prev = out

    gu, gi = P, Q
    for _ in range(global_layers):
        gu, gi = loop_layer(global_edges, gu, gi)
    glob = (gu, gi)

    t = tensors.__getitem__
    target = cascade[-1]
    final = []
    for k in range(K - 1):
        pair = []
        for s, side in enumerate(sides):
            rows = []
            for r, x in enumerate(cascade[k][s]):
                g_fb = None
                if cgf or (gce and share):
                    g_fb = gate(x, t(f"cgf.{k}.{side}.W1"), t(f"cgf.{k}.{side}.b1"),
                                t(f"cgf.{k}.{side}.W2"), t(f"cgf.{k}.{side}.b2"))
                y = list(x)
                if cgf:
                    y = [a + g * b for a, g, b in zip(y, g_fb, target[s][r])]
                if gce:
                    ghat = affine(glob[s][r], t(f"gce_t.{k}.{side}.W3"), t(f"gce_t.{k}.{side}.b3"))
                    if share:
                        g2 = g_fb
                    else:
                        g2 = gate(y, t(f"gce_gate.{k}.{side}.W1"), t(f"gce_gate.{k}.{side}.b1"),
                                  t(f"gce_gate.{k}.{side}.W2"), t(f"gce_gate.{k}.{side}.b2"))
                    y = [a + g * b for a, g, b in zip(y, g2, ghat)]
                rows.append(y)
            pair.append(rows)
        final.append(tuple(pair))
    final.append(target)
    return final, glob


# --------------------------------------------------------------------------
# losses


def bpr_oracle(users, items, triples):
    total = 0.0
    for u, i, j in triples:
        delta = sum(a * (b - c) for a, b, c in zip(users[u], items[i], items[j]))
        total += -math.log(1.0 / (1.0 + math.exp(-delta)))
    return total


def cosine(a, b, eps=1e-12):
    na = max(math.sqrt(sum(x * x for x in a)), eps)
    nb = max(math.sqrt(sum(x * x for x in b)), eps)
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def infonce_oracle(anchor_rows, global_rows, anchors, pool, tau):
    total = 0.0
    for a in anchors:
        num = math.exp(cosine(anchor_rows[a], global_rows[a]) / tau)
        den = sum(math.exp(cosine(anchor_rows[a], global_rows[v]) / tau) for v in pool)
        total += -math.log(num / den)
    return total


# --------------------------------------------------------------------------
# metrics


def metric_oracle(ranked, gt, k):
    top = list(ranked)[:k]
    hits = 0
    dcg = 0.0
    for pos in range(len(top)):
        if top[pos] in gt:
            hits += 1
            dcg += 1.0 / math.log2(pos + 2)
    idcg = 0.0
    for pos in range(min(k, len(gt))):
        idcg += 1.0 / math.log2(pos + 2)
    return hits / k, hits / len(gt), dcg / idcg, float(hits > 0)


def sort_topk_oracle(scores, k, exclude=()):
    ex = set(exclude)
    cands = [(-s, idx) for idx, s in enumerate(scores) if idx not in ex]
    cands.sort()
    return [idx for _, idx in cands[:k]]
