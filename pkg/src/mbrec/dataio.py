"""Interaction-log ingestion, preprocessing and temporal splitting.

The pipeline is ``load_events -> dedup_earliest -> filter_by_purchase_counts
-> temporal_split``. Filtering by "sessions" is applied per user: the logs this
package targets carry no session ids, so a user's whole history stands in for
a session.
"""

from __future__ import annotations

import csv
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

SPLITS = ("train", "val", "test")

DEFAULT_COLUMNS = {
    "user": "user_id",
    "item": "item_id",
    "behavior": "behavior",
    "timestamp": "timestamp",
}


class DataError(ValueError):
    """Raised for malformed input logs or pipelines that produce no usable data."""


@dataclass(frozen=True)
class RawEvent:
    user: str
    item: str
    behavior: str
    timestamp: int


@dataclass
class Dataset:
    """Densely indexed, temporally split multi-behavior interactions.

    ``train``/``val``/``test`` map behavior name to an ``(E, 2)`` int64 array of
    ``(user_index, item_index)`` rows sorted lexicographically.
    """

    num_users: int
    num_items: int
    behaviors: List[str]
    train: Dict[str, np.ndarray]
    val: Dict[str, np.ndarray]
    test: Dict[str, np.ndarray]
    user_ids: List[str] = field(default_factory=list)
    item_ids: List[str] = field(default_factory=list)

    @property
    def target(self) -> str:
        return self.behaviors[-1]

    def split(self, name: str) -> Dict[str, np.ndarray]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def user_map(self) -> Dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    def item_map(self) -> Dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    def with_behaviors(self, behaviors: Sequence[str]) -> "Dataset":
        """Return a view restricted to / reordered by ``behaviors``."""
        missing = [b for b in behaviors if b not in self.behaviors]
        if missing:
            raise DataError(f"behaviors not in dataset: {missing}")
        pick = lambda d: {b: d[b] for b in behaviors}  # noqa: E731
        return Dataset(self.num_users, self.num_items, list(behaviors),
                       pick(self.train), pick(self.val), pick(self.test),
                       self.user_ids, self.item_ids)


# --------------------------------------------------------------------------
# loading


def load_events(path, behaviors: Sequence[str],
                columns: Optional[Mapping[str, str]] = None,
                delimiter: str = "\t") -> List[RawEvent]:
    """Parse a delimited log with a header row into ``RawEvent`` objects.

    ``columns`` maps the logical fields ``user``, ``item``, ``behavior`` and
    ``timestamp`` to header names. Row order is preserved.
    """
    columns = dict(DEFAULT_COLUMNS, **(columns or {}))
    accepted = set(behaviors)
    events: List[RawEvent] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None:
            return events
        try:
            pos = {key: header.index(name) for key, name in columns.items()}
        except ValueError as exc:
            raise DataError(f"{path}: header {header} lacks a mapped column ({exc})") from None
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            beh = row[pos["behavior"]]
            if beh not in accepted:
                raise DataError(f"{path}:{lineno}: unknown behavior {beh!r} "
                                f"(accepted: {', '.join(behaviors)})")
            try:
                ts = int(row[pos["timestamp"]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp "
                                f"{row[pos['timestamp']]!r} is not an integer") from None
            if ts < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp {ts}")
            events.append(RawEvent(row[pos["user"]], row[pos["item"]], beh, ts))
    return events


def write_events(path, events: Iterable[RawEvent], delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([DEFAULT_COLUMNS[k] for k in ("user", "item", "behavior", "timestamp")])
        for e in events:
            w.writerow([e.user, e.item, e.behavior, e.timestamp])


# --------------------------------------------------------------------------
# preprocessing


def dedup_earliest(events: Sequence[RawEvent]) -> List[RawEvent]:
    """Keep one event per (user, item, behavior): the earliest, first on ties."""
    best: Dict[tuple, int] = {}
    for idx, e in enumerate(events):
        key = (e.user, e.item, e.behavior)
        prev = best.get(key)
        if prev is None or e.timestamp < events[prev].timestamp:
            best[key] = idx
    keep = sorted(best.values())
    return [events[i] for i in keep]


def filter_by_purchase_counts(events: Sequence[RawEvent], item_min_purchases: int,
                              user_min_purchases: int, target: str) -> List[RawEvent]:
    """Drop items, then users, with too few ``target`` events; repeat to a fixed point."""
    current = list(events)
    while True:
        n_before = len(current)
        if item_min_purchases > 0:
            counts = Counter(e.item for e in current if e.behavior == target)
            current = [e for e in current if counts[e.item] >= item_min_purchases]
        if user_min_purchases > 0:
            counts = Counter(e.user for e in current if e.behavior == target)
            current = [e for e in current if counts[e.user] >= user_min_purchases]
        if len(current) == n_before:
            break
    if not current:
        raise DataError("filters removed all data")
    return current


def _cut_index(frac: float, n: int) -> int:
    # index of the last event inside the first `frac` of the timeline
    return min(n - 1, max(0, math.ceil(frac * n - 1e-9) - 1))


def temporal_split(events: Sequence[RawEvent], behaviors: Sequence[str],
                   train_frac: float = 0.8, val_frac: float = 0.1) -> Dataset:
    """Split by global timestamp quantiles and densely reindex.

    Events at a boundary timestamp go to the earlier split. Users and items
    without any training event are dropped from validation and test.
    """
    if not (0 < train_frac and 0 < val_frac and train_frac + val_frac < 1):
        raise DataError(f"invalid split fractions ({train_frac}, {val_frac})")
    if not events:
        raise DataError("no events to split")
    ts = np.sort(np.fromiter((e.timestamp for e in events), dtype=np.int64, count=len(events)))
    n = len(ts)
    t1 = ts[_cut_index(train_frac, n)]
    t2 = ts[_cut_index(train_frac + val_frac, n)]

    parts: Dict[str, List[RawEvent]] = {s: [] for s in SPLITS}
    for e in events:
        if e.timestamp <= t1:
            parts["train"].append(e)
        elif e.timestamp <= t2:
            parts["val"].append(e)
        else:
            parts["test"].append(e)

    train_users = sorted({e.user for e in parts["train"]})
    train_items = sorted({e.item for e in parts["train"]})
    umap = {u: k for k, u in enumerate(train_users)}
    imap = {i: k for k, i in enumerate(train_items)}

    out: Dict[str, Dict[str, np.ndarray]] = {}
    for split in SPLITS:
        per_beh: Dict[str, set] = defaultdict(set)
        for e in parts[split]:
            u = umap.get(e.user)
            i = imap.get(e.item)
            if u is None or i is None:
                continue
            per_beh[e.behavior].add((u, i))
        out[split] = {b: _edge_array(per_beh.get(b, ())) for b in behaviors}

    for b in behaviors:
        if len(out["train"][b]) == 0:
            raise DataError(f"behavior {b!r} has no training edges")
    return Dataset(len(train_users), len(train_items), list(behaviors),
                   out["train"], out["val"], out["test"], train_users, train_items)


def _edge_array(pairs) -> np.ndarray:
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    arr = np.array(sorted(pairs), dtype=np.int64)
    return arr.reshape(-1, 2)


def preprocess(events: Sequence[RawEvent], behaviors: Sequence[str],
               item_min_purchases: int, user_min_purchases: int,
               train_frac: float = 0.8, val_frac: float = 0.1) -> Dataset:
    """Run dedup, fixed-point purchase filtering and the temporal split."""
    events = dedup_earliest(events)
    events = filter_by_purchase_counts(events, item_min_purchases, user_min_purchases,
                                       target=behaviors[-1])
    return temporal_split(events, behaviors, train_frac, val_frac)


# --------------------------------------------------------------------------
# persistence


def save_dataset(ds: Dataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = [
        f"num_users={ds.num_users}",
        f"num_items={ds.num_items}",
        f"behaviors={','.join(ds.behaviors)}",
    ]
    for split in SPLITS:
        for b in ds.behaviors:
            lines.append(f"{split}.{b}={len(ds.split(split)[b])}")
    _write_text(os.path.join(directory, "meta.txt"), "\n".join(lines) + "\n")
    for split in SPLITS:
        for b in ds.behaviors:
            edges = ds.split(split)[b]
            body = "".join(f"{u}\t{i}\n" for u, i in edges.tolist())
            _write_text(os.path.join(directory, f"{split}.{b}.tsv"), body)
    _write_text(os.path.join(directory, "user_map.tsv"),
                "".join(f"{uid}\t{k}\n" for k, uid in enumerate(ds.user_ids)))
    _write_text(os.path.join(directory, "item_map.tsv"),
                "".join(f"{iid}\t{k}\n" for k, iid in enumerate(ds.item_ids)))


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def read_meta(path) -> Dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                meta[key] = value
    return meta


def load_dataset(directory) -> Dataset:
    meta_path = os.path.join(directory, "meta.txt")
    if not os.path.exists(meta_path):
        raise DataError(f"{directory} is not a prepared dataset (missing meta.txt)")
    meta = read_meta(meta_path)
    behaviors = meta["behaviors"].split(",")
    splits = {}
    for split in SPLITS:
        splits[split] = {}
        for b in behaviors:
            arr = np.loadtxt(os.path.join(directory, f"{split}.{b}.tsv"),
                             dtype=np.int64, delimiter="\t", ndmin=2)
            splits[split][b] = arr.reshape(-1, 2)

    def read_ids(name):
        with open(os.path.join(directory, name), encoding="utf-8") as fh:
            return [line.rstrip("\n").split("\t")[0] for line in fh if line.strip()]

    return Dataset(int(meta["num_users"]), int(meta["num_items"]), behaviors,
                   splits["train"], splits["val"], splits["test"],
                   read_ids("user_map.tsv"), read_ids("item_map.tsv"))


# --------------------------------------------------------------------------
# statistics


def split_statistics(ds: Dataset) -> Dict[str, Dict[str, float]]:
    """Counts in the layout of a dataset summary table.

    Rows are ``#Users``, ``#Items`` and one ``#<behavior>`` per behavior;
    columns are ``total``, ``density`` (per mille, behaviors only), and the
    three splits.
    """
    rows: Dict[str, Dict[str, float]] = {}
    users = {s: set() for s in SPLITS}
    items = {s: set() for s in SPLITS}
    for s in SPLITS:
        for b in ds.behaviors:
            e = ds.split(s)[b]
            users[s].update(e[:, 0].tolist())
            items[s].update(e[:, 1].tolist())
    rows["#Users"] = {"total": len(users["train"] | users["val"] | users["test"]),
                      **{s: len(users[s]) for s in SPLITS}}
    rows["#Items"] = {"total": len(items["train"] | items["val"] | items["test"]),
                      **{s: len(items[s]) for s in SPLITS}}
    cells = max(ds.num_users * ds.num_items, 1)
    for b in ds.behaviors:
        counts = {s: len(ds.split(s)[b]) for s in SPLITS}
        total = sum(counts.values())
        rows[f"#{b}"] = {"total": total, "density": 1000.0 * total / cells, **counts}
    return rows
