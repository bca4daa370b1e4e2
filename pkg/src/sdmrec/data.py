"""Interaction / transaction ingestion, k-core filtering, leave-one-out splits,
training-instance construction and negative sampling."""
from __future__ import annotations

import csv
import dataclasses
from collections import Counter
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .numkit import RngStream

SPLIT_CODES = {"train": 0, "dev": 1, "test": 2}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}
MIN_BASKET = 5


class DataError(ValueError):
    pass


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: int


@dataclasses.dataclass
class InteractionLog:
    """Deduplicated interactions in file order plus the dense-id label maps."""

    records: list[Interaction]
    user_labels: list[str]
    item_labels: list[str]

    @property
    def num_users(self) -> int:
        return len(self.user_labels)

    @property
    def num_items(self) -> int:
        return len(self.item_labels)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]


def _label_order(labels: Iterable[str]) -> list[str]:
    labels = set(labels)
    try:
        return sorted(labels, key=int)
    except ValueError:
        return sorted(labels)


def _reindex(raw: list[tuple[str, str, int]]) -> InteractionLog:
    users = _label_order(r[0] for r in raw)
    items = _label_order(r[1] for r in raw)
    uidx = {u: i for i, u in enumerate(users)}
    iidx = {v: i for i, v in enumerate(items)}
    recs = [Interaction(uidx[u], iidx[v], ts) for u, v, ts in raw]
    return InteractionLog(recs, users, items)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def load_interactions(path, format: str = "movielens_tsv") -> InteractionLog:
    """Read a (user, item, rating, timestamp) log; every row becomes a positive.

    Duplicate (user, item) pairs keep the earliest timestamp and the position
    of their first occurrence.
    """
    if format == "movielens_tsv":
        delim = "\t"
    elif format == "generic_csv":
        delim = ","
    else:
        raise DataError(f"unknown format {format!r} (expected movielens_tsv or generic_csv)")

    first: dict[tuple[str, str], int] = {}
    raw: list[list] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delim), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            row = [c.strip() for c in row]
            if len(row) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            user, item, rating = row[0], row[1], row[2]
            ts_tok = row[3] if len(row) == 4 else ""
            if lineno == 1 and not _is_number(rating):
                continue  # header
            if not user or not item or not _is_number(rating):
                raise DataError(f"{path}:{lineno}: malformed row {row!r}")
            try:
                ts = int(float(ts_tok)) if ts_tok else 0
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {ts_tok!r}") from None
            key = (user, item)
            if key in first:
                entry = raw[first[key]]
                entry[2] = min(entry[2], ts)
                continue
            first[key] = len(raw)
            raw.append([user, item, ts])
    return _reindex([tuple(r) for r in raw])


def kcore_filter(log: InteractionLog, k: int = 5) -> InteractionLog:
    """Drop users and items with fewer than k interactions until nothing changes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    recs = list(log.records)
    while True:
        ucount = Counter(r.user for r in recs)
        icount = Counter(r.item for r in recs)
        kept = [r for r in recs if ucount[r.user] >= k and icount[r.item] >= k]
        if len(kept) == len(recs):
            break
        recs = kept
    if not recs and len(log):
        raise DataError("empty after k-core")
    raw = [(log.user_labels[r.user], log.item_labels[r.item], r.timestamp) for r in recs]
    return _reindex(raw)


# --------------------------------------------------------------------------
# split + bundle
# --------------------------------------------------------------------------

@dataclasses.dataclass
class DatasetBundle:
    """Leave-one-out split. `dev_items` / `test_items` hold one item per user."""

    num_users: int
    num_items: int
    train_sequences: list[np.ndarray]   # per user, chronological training items
    train_times: list[np.ndarray]
    dev_items: np.ndarray
    test_items: np.ndarray
    user_labels: list[str]
    item_labels: list[str]
    task: str = "general"
    extra_positives: list[np.ndarray] | None = None

    @property
    def pad(self) -> int:
        return self.num_items

    @cached_property
    def positives(self) -> list[np.ndarray]:
        """Sorted unique items each user touched in any split."""
        out = []
        for u in range(self.num_users):
            parts = [self.train_sequences[u], [self.dev_items[u], self.test_items[u]]]
            if self.extra_positives is not None:
                parts.append(self.extra_positives[u])
            items = np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])
            out.append(np.unique(items[items >= 0]))
        return out

    @cached_property
    def train_positive_sets(self) -> list[frozenset]:
        return [frozenset(int(i) for i in seq) for seq in self.train_sequences]

    def num_train_positives(self) -> int:
        return sum(len(s) for s in self.train_sequences)


def split_leave_one_out(log: InteractionLog, rng: RngStream) -> DatasetBundle:
    """Latest interaction per user is the test item, one random remaining one is dev."""
    per_user: list[list[tuple[int, int, int]]] = [[] for _ in range(log.num_users)]
    for pos, r in enumerate(log.records):
        per_user[r.user].append((r.timestamp, pos, r.item))
    short = [log.user_labels[u] for u, rows in enumerate(per_user) if len(rows) < 3]
    if short:
        raise DataError(f"users with fewer than 3 interactions: {', '.join(short[:20])}"
                        + (" ..." if len(short) > 20 else ""))

    train_seq, train_ts = [], []
    dev = np.empty(log.num_users, dtype=np.int64)
    test = np.empty(log.num_users, dtype=np.int64)
    for u, rows in enumerate(per_user):
        rows.sort()
        if all(ts == 0 for ts, _, _ in rows):
            t_idx = int(rng.uniform_int(0, len(rows) - 1))
        else:
            t_idx = len(rows) - 1
        test[u] = rows[t_idx][2]
        rest = rows[:t_idx] + rows[t_idx + 1:]
        d_idx = int(rng.uniform_int(0, len(rest) - 1))
        dev[u] = rest[d_idx][2]
        rest = rest[:d_idx] + rest[d_idx + 1:]
        train_seq.append(np.array([r[2] for r in rest], dtype=np.int64))
        train_ts.append(np.array([r[0] for r in rest], dtype=np.int64))
    return DatasetBundle(log.num_users, log.num_items, train_seq, train_ts, dev, test,
                         list(log.user_labels), list(log.item_labels))


# --------------------------------------------------------------------------
# instances
# --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TrainingInstance:
    user_id: int
    target_item: int
    context_items: tuple[int, ...]
    mask: tuple[bool, ...]
    split_tag: str


@dataclasses.dataclass
class Instances:
    """Column-wise instance table. Context slots hold PAD (= num_items) where mask is False."""

    users: np.ndarray
    targets: np.ndarray
    contexts: np.ndarray
    masks: np.ndarray
    splits: np.ndarray
    pad: int

    def __post_init__(self) -> None:
        self.users = np.asarray(self.users, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.contexts = np.asarray(self.contexts, dtype=np.int64).reshape(len(self.users), -1)
        self.masks = np.asarray(self.masks, dtype=bool).reshape(self.contexts.shape)
        self.splits = np.asarray(self.splits, dtype=np.int8)

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, i: int) -> TrainingInstance:
        return TrainingInstance(int(self.users[i]), int(self.targets[i]),
                                tuple(int(c) for c in self.contexts[i]),
                                tuple(bool(m) for m in self.masks[i]),
                                SPLIT_NAMES[int(self.splits[i])])

    @property
    def context_len(self) -> int:
        return self.contexts.shape[1]

    @property
    def usable(self) -> np.ndarray:
        """True where at least one context slot is real (SDM can score it)."""
        return self.masks.any(axis=1)

    def subset(self, idx) -> "Instances":
        return Instances(self.users[idx], self.targets[idx], self.contexts[idx],
                         self.masks[idx], self.splits[idx], self.pad)

    def split(self, name: str) -> "Instances":
        return self.subset(np.flatnonzero(self.splits == SPLIT_CODES[name]))

    def write_tsv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("user\ttarget\tcontext\tmask\tsplit\n")
            for u, t, c, m, s in zip(self.users, self.targets, self.contexts, self.masks, self.splits):
                fh.write(f"{u}\t{t}\t{','.join(map(str, c))}\t{''.join('1' if x else '0' for x in m)}"
                         f"\t{SPLIT_NAMES[int(s)]}\n")
        return path

    @classmethod
    def read_tsv(cls, path, pad: int) -> "Instances":
        users, targets, ctx, masks, splits = [], [], [], [], []
        with open(path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                u, t, c, m, s = line.rstrip("\n").split("\t")
                users.append(int(u))
                targets.append(int(t))
                ctx.append([int(x) for x in c.split(",")])
                masks.append([x == "1" for x in m])
                splits.append(SPLIT_CODES[s])
        width = len(ctx[0]) if ctx else 0
        return cls(np.array(users), np.array(targets), np.array(ctx).reshape(len(users), width),
                   np.array(masks).reshape(len(users), width), np.array(splits), pad)


def _left_padded(items: np.ndarray, s: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    items = items[-s:] if len(items) else items
    ctx = np.full(s, pad, dtype=np.int64)
    mask = np.zeros(s, dtype=bool)
    if len(items):
        ctx[s - len(items):] = items
        mask[s - len(items):] = True
    return ctx, mask


def build_context_instances(bundle: DatasetBundle, s: int) -> Instances:
    """General-task instances: latest s prior training items as context.

    A training positive with no earlier training item gets an all-PAD context
    (see `Instances.usable`). Dev and test instances use the user's s latest
    training items.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    pad = bundle.pad
    users, targets, ctx, masks, splits = [], [], [], [], []
    for u in range(bundle.num_users):
        seq = bundle.train_sequences[u]
        for p in range(len(seq)):
            c, m = _left_padded(seq[max(0, p - s):p], s, pad)
            users.append(u); targets.append(seq[p]); ctx.append(c); masks.append(m)
            splits.append(SPLIT_CODES["train"])
        c, m = _left_padded(seq, s, pad)
        for item, tag in ((bundle.dev_items[u], "dev"), (bundle.test_items[u], "test")):
            users.append(u); targets.append(item); ctx.append(c); masks.append(m)
            splits.append(SPLIT_CODES[tag])
    n = len(users)
    return Instances(np.array(users), np.array(targets), np.array(ctx).reshape(n, s),
                     np.array(masks).reshape(n, s), np.array(splits), pad)


# --------------------------------------------------------------------------
# basket task
# --------------------------------------------------------------------------

@dataclasses.dataclass
class Transaction:
    transaction_id: str
    user_id: int
    item_ids: list[int]
    timestamp: int


@dataclasses.dataclass
class TransactionLog:
    transactions: list[Transaction]
    user_labels: list[str]
    item_labels: list[str]

    @property
    def num_users(self) -> int:
        return len(self.user_labels)

    @property
    def num_items(self) -> int:
        return len(self.item_labels)

    def __len__(self) -> int:
        return len(self.transactions)

    def __iter__(self):
        return iter(self.transactions)


def load_transactions(path) -> TransactionLog:
    """CSV rows (transaction_id, user_id, item_id, timestamp); items keep file order."""
    groups: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            row = [c.strip() for c in row]
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            tid, user, item, ts_tok = row
            if lineno == 1 and not _is_number(ts_tok or "0"):
                continue  # header
            try:
                ts = int(float(ts_tok)) if ts_tok else 0
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad timestamp {ts_tok!r}") from None
            g = groups.get(tid)
            if g is None:
                groups[tid] = [user, [], ts]
                g = groups[tid]
            elif g[0] != user:
                raise DataError(f"{path}:{lineno}: transaction {tid} spans users {g[0]} and {user}")
            if item not in g[1]:
                g[1].append(item)
            g[2] = min(g[2], ts)
    return _reindex_transactions([(tid, u, items, ts) for tid, (u, items, ts) in groups.items()])


def _reindex_transactions(raw) -> TransactionLog:
    users = _label_order(r[1] for r in raw)
    items = _label_order(v for r in raw for v in r[2])
    uidx = {u: i for i, u in enumerate(users)}
    iidx = {v: i for i, v in enumerate(items)}
    txs = [Transaction(tid, uidx[u], [iidx[v] for v in its], ts) for tid, u, its, ts in raw]
    return TransactionLog(txs, users, items)


def filter_transactions(log: TransactionLog, min_items: int = MIN_BASKET) -> TransactionLog:
    """Keep transactions with at least `min_items` distinct items and re-index."""
    kept = [(t.transaction_id, log.user_labels[t.user_id], [log.item_labels[i] for i in t.item_ids],
             t.timestamp) for t in log.transactions if len(t.item_ids) >= min_items]
    if not kept:
        raise DataError("no transaction has enough items")
    return _reindex_transactions(kept)


def _latest_transaction(log: TransactionLog) -> dict[int, int]:
    latest: dict[int, tuple[int, int]] = {}
    for pos, t in enumerate(log.transactions):
        key = (t.timestamp, pos)
        if t.user_id not in latest or key > latest[t.user_id]:
            latest[t.user_id] = key
    return {u: key[1] for u, key in latest.items()}


def build_basket_instances(log: TransactionLog) -> Instances:
    """One instance per (transaction, item): the item is the target, the rest is context.

    In each user's latest transaction the last item's instance is tagged test
    and the second-to-last one dev; everything else is train.
    """
    txs = log.transactions
    for t in txs:
        if len(t.item_ids) < MIN_BASKET:
            raise DataError(f"transaction {t.transaction_id} has {len(t.item_ids)} items (< {MIN_BASKET})")
    pad = log.num_items
    width = max((len(t.item_ids) for t in txs), default=MIN_BASKET) - 1
    latest = set(_latest_transaction(log).values())
    users, targets, ctx, masks, splits = [], [], [], [], []
    for pos, t in enumerate(txs):
        n = len(t.item_ids)
        for j, item in enumerate(t.item_ids):
            rest = np.array(t.item_ids[:j] + t.item_ids[j + 1:], dtype=np.int64)
            c, m = _left_padded(rest, width, pad)
            users.append(t.user_id); targets.append(item); ctx.append(c); masks.append(m)
            tag = "train"
            if pos in latest:
                tag = "test" if j == n - 1 else "dev" if j == n - 2 else "train"
            splits.append(SPLIT_CODES[tag])
    k = len(users)
    return Instances(np.array(users, dtype=np.int64), np.array(targets, dtype=np.int64),
                     np.array(ctx, dtype=np.int64).reshape(k, width),
                     np.array(masks, dtype=bool).reshape(k, width), np.array(splits), pad)


def basket_bundle(log: TransactionLog, instances: Instances) -> DatasetBundle:
    """Bundle view of the basket split (per-user positives, dev/test items)."""
    dev = np.full(log.num_users, -1, dtype=np.int64)
    test = np.full(log.num_users, -1, dtype=np.int64)
    train: list[list[int]] = [[] for _ in range(log.num_users)]
    for u, t, s in zip(instances.users, instances.targets, instances.splits):
        if s == SPLIT_CODES["dev"]:
            dev[u] = t
        elif s == SPLIT_CODES["test"]:
            test[u] = t
        else:
            train[u].append(int(t))
    seqs = [np.array(x, dtype=np.int64) for x in train]
    times = [np.zeros(len(x), dtype=np.int64) for x in train]
    return DatasetBundle(log.num_users, log.num_items, seqs, times, dev, test,
                         list(log.user_labels), list(log.item_labels), task="basket")


def write_bundle(directory, bundle: DatasetBundle) -> Path:
    """bundle.tsv (one row per split interaction) plus users.txt / items.txt label files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "bundle.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"# sdmrec-bundle num_users={bundle.num_users} num_items={bundle.num_items} "
                 f"task={bundle.task}\n")
        fh.write("user\titem\ttimestamp\tsplit\n")
        for u in range(bundle.num_users):
            for item, ts in zip(bundle.train_sequences[u], bundle.train_times[u]):
                fh.write(f"{u}\t{item}\t{ts}\ttrain\n")
            for item, tag in ((bundle.dev_items[u], "dev"), (bundle.test_items[u], "test")):
                if item >= 0:
                    fh.write(f"{u}\t{item}\t0\t{tag}\n")
    (d / "users.txt").write_text("".join(f"{x}\n" for x in bundle.user_labels), encoding="utf-8")
    (d / "items.txt").write_text("".join(f"{x}\n" for x in bundle.item_labels), encoding="utf-8")
    return d / "bundle.tsv"


def read_bundle(directory) -> DatasetBundle:
    d = Path(directory)
    path = d / "bundle.tsv"
    if not path.exists():
        raise FileNotFoundError(f"missing bundle file {path} (run `sdmrec prep` first)")
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().split()
        if len(head) < 2 or head[1] != "sdmrec-bundle":
            raise DataError(f"{path}: not a bundle file")
        meta = dict(tok.split("=", 1) for tok in head[2:])
        M, N = int(meta["num_users"]), int(meta["num_items"])
        next(fh)
        seqs: list[list[int]] = [[] for _ in range(M)]
        times: list[list[int]] = [[] for _ in range(M)]
        dev = np.full(M, -1, dtype=np.int64)
        test = np.full(M, -1, dtype=np.int64)
        for line in fh:
            u, i, ts, tag = line.rstrip("\n").split("\t")
            u, i = int(u), int(i)
            if tag == "train":
                seqs[u].append(i)
                times[u].append(int(ts))
            elif tag == "dev":
                dev[u] = i
            else:
                test[u] = i
    users = (d / "users.txt").read_text(encoding="utf-8").splitlines()
    items = (d / "items.txt").read_text(encoding="utf-8").splitlines()
    return DatasetBundle(M, N, [np.array(x, dtype=np.int64) for x in seqs],
                         [np.array(x, dtype=np.int64) for x in times], dev, test, users, items,
                         task=meta.get("task", "general"))


# --------------------------------------------------------------------------
# negatives
# --------------------------------------------------------------------------

class NegativeSampler:
    """Uniform sampling of items a user never interacted with (any split).

    Within one row of a draw the items are distinct.
    """

    def __init__(self, bundle: DatasetBundle) -> None:
        self.num_items = bundle.num_items
        pos = bundle.positives
        self._keys = np.concatenate(
            [u * self.num_items + p for u, p in enumerate(pos)] or [np.empty(0, np.int64)]
        ).astype(np.int64)
        self._keys.sort()
        self._n_pos = np.array([len(p) for p in pos], dtype=np.int64)
        self._pos = pos

    def _is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.num_items + items
        idx = np.searchsorted(self._keys, keys)
        idx = np.minimum(idx, len(self._keys) - 1) if len(self._keys) else idx
        return (self._keys[idx] == keys) if len(self._keys) else np.zeros(keys.shape, bool)

    def sample(self, users: np.ndarray, count: int, rng: RngStream) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        avail = self.num_items - self._n_pos[users]
        if len(users) and avail.min() < count:
            bad = int(users[np.argmin(avail)])
            raise DataError(f"user {bad} has only {int(avail.min())} unobserved items, need {count}")
        out = np.empty((len(users), count), dtype=np.int64)
        # small eligible pools are sampled exactly; the rest by rejection
        small = avail < 4 * count
        for r in np.flatnonzero(small):
            elig = np.setdiff1d(np.arange(self.num_items), self._pos[users[r]], assume_unique=True)
            out[r] = rng.choice(elig, size=count, replace=False)
        rows = np.flatnonzero(~small)
        if len(rows) == 0:
            return out
        cand = rng.uniform_int(0, self.num_items - 1, size=(len(rows), count))
        while True:
            bad = self._is_positive(np.repeat(users[rows], count).reshape(-1, count), cand)
            srt = np.sort(cand, axis=1)
            if count > 1:
                dup_sorted = np.zeros_like(srt, dtype=bool)
                dup_sorted[:, 1:] = srt[:, 1:] == srt[:, :-1]
                if dup_sorted.any():
                    order = np.argsort(cand, axis=1, kind="stable")
                    dup = np.zeros_like(dup_sorted)
                    np.put_along_axis(dup, order, dup_sorted, axis=1)
                    bad |= dup
            if not bad.any():
                break
            cand[bad] = rng.uniform_int(0, self.num_items - 1, size=int(bad.sum()))
        out[rows] = cand
        return out


def sample_negatives(bundle: DatasetBundle, user: int, count: int, rng: RngStream,
                     sampler: NegativeSampler | None = None) -> list[int]:
    sampler = sampler or NegativeSampler(bundle)
    return [int(x) for x in sampler.sample(np.array([user]), count, rng)[0]]
