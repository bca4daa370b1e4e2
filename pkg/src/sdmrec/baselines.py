"""Reference scorers: ItemKNN (cosine), MF-BPR (inner product), CML (squared distance)."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .data import DatasetBundle
from .numkit import ParameterStore, RngStream
from .sdp import scatter_rows


class ItemKNN:
    """Sum of cosine similarities between a candidate and the user's training items."""

    polarity = "similarity"
    needs_context = False
    prefix = "itemknn."

    def __init__(self, bundle: DatasetBundle) -> None:
        self.num_users, self.num_items = bundle.num_users, bundle.num_items
        rows = np.concatenate([np.full(len(s), u) for u, s in enumerate(bundle.train_sequences)])
        cols = np.concatenate(bundle.train_sequences)
        R = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.num_users, self.num_items))
        R.sum_duplicates()
        R.data[:] = 1.0  # binary even if an item repeats
        norms = np.sqrt(np.asarray(R.multiply(R).sum(axis=0)).ravel())
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        Rn = R @ sp.diags(inv)
        self.R = R
        self.similarity = (Rn.T @ Rn).tocsr()

    def score(self, users, items, contexts=None, masks=None) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return np.asarray(self.similarity[items].multiply(self.R[users]).sum(axis=1)).ravel()

    def config(self) -> dict:
        return {"kind": "itemknn"}


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


class _Embedding:
    needs_context = False

    def __init__(self, num_users: int, num_items: int, dim: int, *, rng: RngStream | None = None,
                 store: ParameterStore | None = None) -> None:
        self.num_users, self.num_items, self.dim = num_users, num_items, dim
        if store is None:
            rng = rng or RngStream(0)
            store = ParameterStore()
            store.add(self.prefix + "U", rng.gaussian(0.0, 0.01, size=(num_users, dim)))
            V = rng.gaussian(0.0, 0.01, size=(num_items + 1, dim))
            V[num_items] = 0.0
            store.add(self.prefix + "V", V)
        self.store = store

    @property
    def pad(self) -> int:
        return self.num_items

    def _lookup(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range")
        return users, items, self.store[self.prefix + "U"][users], self.store[self.prefix + "V"][items]

    def score(self, users, items, contexts=None, masks=None) -> np.ndarray:
        return self.forward(users, items)[0]

    def embedding_names(self) -> list[str]:
        return [self.prefix + "U", self.prefix + "V"]


class MFBPR(_Embedding):
    polarity = "similarity"
    prefix = "mf."

    def forward(self, users, items, contexts=None, masks=None, ctx_index=None):
        users, items, U, V = self._lookup(users, items)
        return (U * V).sum(axis=1), (users, items, U, V)

    def backward(self, cache, dscore: np.ndarray) -> None:
        users, items, U, V = cache
        scatter_rows(self.store.grad(self.prefix + "U"), users, dscore[:, None] * V)
        scatter_rows(self.store.grad(self.prefix + "V"), items, dscore[:, None] * U)

    def reg_rows(self, users, pos_items, neg_items, contexts=None, masks=None):
        # lambda (|u|^2 + |v+|^2): negatives are not regularised
        return {self.prefix + "U": np.unique(users), self.prefix + "V": np.unique(pos_items)}

    def config(self) -> dict:
        return {"kind": "mfbpr", "num_users": self.num_users, "num_items": self.num_items, "dim": self.dim}


class CML(_Embedding):
    polarity = "distance"
    prefix = "cml."

    def forward(self, users, items, contexts=None, masks=None, ctx_index=None):
        users, items, U, V = self._lookup(users, items)
        diff = U - V
        return (diff * diff).sum(axis=1), (users, items, diff)

    def backward(self, cache, dscore: np.ndarray) -> None:
        users, items, diff = cache
        g = 2.0 * dscore[:, None] * diff
        scatter_rows(self.store.grad(self.prefix + "U"), users, g)
        scatter_rows(self.store.grad(self.prefix + "V"), items, -g)

    def reg_rows(self, users, pos_items, neg_items, contexts=None, masks=None):
        return {self.prefix + "U": np.unique(users),
                self.prefix + "V": np.unique(np.concatenate([pos_items, neg_items]))}

    def config(self) -> dict:
        return {"kind": "cml", "num_users": self.num_users, "num_items": self.num_items, "dim": self.dim}


def itemknn_score(model: ItemKNN, user: int, item: int) -> float:
    return float(model.score(np.array([user]), np.array([item]))[0])


def mfbpr_score(model: MFBPR, user: int, item: int) -> float:
    return float(model.score(np.array([user]), np.array([item]))[0])


def cml_score(model: CML, user: int, item: int) -> float:
    return float(model.score(np.array([user]), np.array([item]))[0])
