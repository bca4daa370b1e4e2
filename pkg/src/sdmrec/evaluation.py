"""Leave-one-out ranking: the held-out item against sampled negatives, hit@k and NDCG@k."""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from .data import DatasetBundle, Instances, NegativeSampler
from .numkit import RngStream

NUM_EVAL_NEGATIVES = 100
_SPLIT_TAGS = {"test": 100, "dev": 101}


@dataclasses.dataclass
class RankResult:
    user: int
    rank: int
    scores: np.ndarray   # scores[0] is the held-out item
    tie_count: int


def rank_from_scores(scores: np.ndarray, polarity: str) -> tuple[np.ndarray, np.ndarray]:
    """Pessimistic ranks of column 0 in each row; returns (ranks, tie counts)."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    test = scores[:, :1]
    others = scores[:, 1:]
    if polarity == "distance":
        better = (others < test).sum(axis=1)
    elif polarity == "similarity":
        better = (others > test).sum(axis=1)
    else:
        raise ValueError(f"unknown polarity {polarity!r}")
    ties = (others == test).sum(axis=1)
    return 1 + better + ties, ties


def rank_items(model, user: int, test_item: int, negatives, context=None, mask=None) -> RankResult:
    negatives = np.asarray(negatives, dtype=np.int64)
    if test_item in set(negatives.tolist()):
        raise ValueError("test item appears among the negatives")
    cands = np.concatenate([[test_item], negatives])
    if (cands >= model.num_items).any() or (cands < 0).any():
        raise ValueError("PAD or out-of-range item among the candidates")
    n = len(cands)
    users = np.full(n, user, dtype=np.int64)
    if context is None:
        ctx = np.zeros((n, 1), dtype=np.int64)
        msk = np.zeros((n, 1), dtype=bool)
    else:
        ctx = np.tile(np.asarray(context, dtype=np.int64), (n, 1))
        msk = np.tile(np.ones(ctx.shape[1], bool) if mask is None else np.asarray(mask, bool), (n, 1))
    scores = np.asarray(model.score(users, cands, ctx, msk), dtype=np.float64)
    rank, ties = rank_from_scores(scores[None, :], model.polarity)
    return RankResult(int(user), int(rank[0]), scores, int(ties[0]))


def evaluate_user(result, k: int = 10) -> tuple[int, float]:
    """(hit, ndcg) for one ranked user; accepts a RankResult or a bare rank."""
    rank = result.rank if isinstance(result, RankResult) else int(result)
    if rank <= k:
        return 1, 1.0 / math.log2(rank + 1)
    return 0, 0.0


def metrics_from_ranks(ranks: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    ranks = np.asarray(ranks)
    hit = (ranks <= k).astype(np.float64)
    ndcg = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return hit, ndcg


def evaluation_negatives(bundle: DatasetBundle, seed: int, split: str = "test",
                         count: int = NUM_EVAL_NEGATIVES) -> np.ndarray:
    """Fixed per-user negatives (users x count) for one split, shared by every model."""
    rng = RngStream(seed).child(_SPLIT_TAGS[split])
    return NegativeSampler(bundle).sample(np.arange(bundle.num_users), count, rng)


def save_negatives(path, negatives: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for u, row in enumerate(negatives):
            fh.write(f"{u}\t{','.join(map(str, row))}\n")
    return path


def load_negatives(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            _, items = line.rstrip("\n").split("\t")
            rows.append([int(x) for x in items.split(",")])
    return np.array(rows, dtype=np.int64)


def rank_instances(model, instances: Instances, negatives: np.ndarray, chunk_rows: int = 20000) -> np.ndarray:
    """Rank each instance's target among negatives[user]; all candidates share the instance context."""
    n = len(instances)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    neg = negatives[instances.users]
    cands = np.concatenate([instances.targets[:, None], neg], axis=1)
    width = cands.shape[1]
    per_chunk = max(1, chunk_rows // width)
    scores = np.empty(cands.shape)
    for lo in range(0, n, per_chunk):
        hi = min(n, lo + per_chunk)
        b = hi - lo
        users = np.repeat(instances.users[lo:hi], width)
        ctx = np.repeat(instances.contexts[lo:hi], width, axis=0)
        msk = np.repeat(instances.masks[lo:hi], width, axis=0)
        scores[lo:hi] = np.asarray(model.score(users, cands[lo:hi].reshape(-1), ctx, msk)).reshape(b, width)
    return rank_from_scores(scores, model.polarity)[0]


@dataclasses.dataclass
class MetricReport:
    k: int
    hit_at_k: float
    ndcg_at_k: float
    users: np.ndarray
    ranks: np.ndarray
    hits: np.ndarray
    ndcgs: np.ndarray
    seed: int
    model_id: str = ""
    config_hash: str = ""
    split: str = "test"

    def summary(self) -> dict:
        return {"model": self.model_id, "split": self.split, "k": self.k,
                "hit": round(self.hit_at_k, 6), "ndcg": round(self.ndcg_at_k, 6),
                "users": int(len(self.users)), "seed": self.seed, "config_hash": self.config_hash}

    def summary_line(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)

    def write_tsv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# model={self.model_id} split={self.split} k={self.k} seed={self.seed} "
                     f"config_hash={self.config_hash}\n")
            fh.write("user\trank\thit\tndcg\n")
            for u, r, h, g in zip(self.users, self.ranks, self.hits, self.ndcgs):
                fh.write(f"{u}\t{r}\t{int(h)}\t{g:.10f}\n")
            fh.write(f"# mean\t\t{self.hit_at_k:.10f}\t{self.ndcg_at_k:.10f}\n")
        return path


def evaluate_instances(model, instances: Instances, negatives: np.ndarray, k: int = 10) -> tuple[float, float]:
    ranks = rank_instances(model, instances, negatives)
    hit, ndcg = metrics_from_ranks(ranks, k)
    return float(hit.mean()), float(ndcg.mean())


def evaluate_all(model, bundle: DatasetBundle, instances: Instances, k: int = 10, seed: int = 0, *,
                 negatives: np.ndarray | None = None, split: str = "test",
                 model_id: str = "", config_hash: str = "") -> MetricReport:
    """Rank every user's held-out instance of `split` and aggregate."""
    if not 1 <= k:
        raise ValueError("k must be >= 1")
    held = instances.split(split)
    if negatives is None:
        negatives = evaluation_negatives(bundle, seed, split)
    ranks = rank_instances(model, held, negatives)
    hit, ndcg = metrics_from_ranks(ranks, k)
    return MetricReport(k, float(hit.mean()) if len(hit) else 0.0, float(ndcg.mean()) if len(ndcg) else 0.0,
                        held.users.copy(), ranks, hit, ndcg, seed, model_id, config_hash, split)


class RandomScorer:
    """Uniform random scores; a sanity baseline for the evaluator."""

    polarity = "similarity"
    needs_context = False

    def __init__(self, num_items: int, seed: int = 0) -> None:
        self.num_items = num_items
        self._rng = RngStream(seed)

    def score(self, users, items, contexts=None, masks=None) -> np.ndarray:
        return self._rng.uniform(size=len(np.asarray(items)))
