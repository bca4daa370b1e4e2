"""Signed Distance-based Perceptron.

An MLP over [u; v] whose last hidden layer is squared element-wise and mixed
by a signed output layer, so the score behaves like a (signed) distance.
"""
from __future__ import annotations

import numpy as np

from .numkit import ParameterStore, RngStream, glorot_uniform, tanh

ACTIVATIONS = ("tanh", "identity")


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    return tanh(x) if kind == "tanh" else x


def activate_grad(kind: str, y: np.ndarray) -> np.ndarray:
    """Derivative expressed through the activation output y."""
    return 1.0 - y * y if kind == "tanh" else np.ones_like(y)


def scatter_rows(grad: np.ndarray, rows: np.ndarray, vals: np.ndarray) -> None:
    """grad[rows] += vals with repeated rows summed (fixed index order)."""
    rows = rows.reshape(-1)
    if rows.size == 0:
        return
    vals = vals.reshape(-1, grad.shape[1])
    order = np.argsort(rows, kind="stable")
    srt = rows[order]
    start = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
    grad[srt[start]] += np.add.reduceat(vals[order], start, axis=0)


class SDP:
    polarity = "distance"
    needs_context = False
    prefix = "sdp."

    def __init__(self, num_users: int, num_items: int, dim: int, *, layers: int = 1,
                 activation: str = "tanh", rng: RngStream | None = None,
                 store: ParameterStore | None = None) -> None:
        if layers < 1:
            raise ValueError("SDP needs at least one layer")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.num_users, self.num_items, self.dim = num_users, num_items, dim
        self.layers, self.activation = layers, activation
        if store is None:
            rng = rng or RngStream(0)
            store = ParameterStore()
            p = self.prefix
            store.add(p + "U", rng.gaussian(0.0, 0.01, size=(num_users, dim)))
            V = rng.gaussian(0.0, 0.01, size=(num_items + 1, dim))
            V[num_items] = 0.0
            store.add(p + "V", V)
            for l in range(1, layers + 1):
                fan_in = 2 * dim if l == 1 else dim
                store.add(f"{p}layer{l}.W", glorot_uniform(rng, dim, fan_in))
                store.add(f"{p}layer{l}.b", np.zeros(dim))
            store.add(p + "out.w", glorot_uniform(rng, 1, dim).reshape(dim))
            store.add(p + "out.b", np.zeros(1))
        self.store = store

    @property
    def pad(self) -> int:
        return self.num_items

    def _check(self, users: np.ndarray, items: np.ndarray) -> None:
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range (PAD is not a valid candidate)")

    def forward(self, users, items, contexts=None, masks=None, ctx_index=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check(users, items)
        p, st = self.prefix, self.store
        x = np.concatenate([st[p + "U"][users], st[p + "V"][items]], axis=1)
        acts = [x]
        for l in range(1, self.layers + 1):
            h = acts[-1] @ st[f"{p}layer{l}.W"].T + st[f"{p}layer{l}.b"]
            acts.append(activate(self.activation, h))
        last = acts[-1]
        sq = last * last
        score = sq @ st[p + "out.w"] + st[p + "out.b"][0]
        return score, (users, items, acts, sq)

    def score(self, users, items, contexts=None, masks=None) -> np.ndarray:
        return self.forward(users, items)[0]

    def features(self, users, items, contexts=None, masks=None) -> np.ndarray:
        """The squared last layer (non-negative, width d)."""
        return self.forward(users, items)[1][3]

    def backward(self, cache, dscore: np.ndarray) -> None:
        users, items, acts, sq = cache
        p, st = self.prefix, self.store
        st.grad(p + "out.w")[:] += sq.T @ dscore
        st.grad(p + "out.b")[0] += dscore.sum()
        dlast = dscore[:, None] * st[p + "out.w"][None, :] * 2.0 * acts[-1]
        for l in range(self.layers, 0, -1):
            dpre = dlast * activate_grad(self.activation, acts[l])
            st.grad(f"{p}layer{l}.W")[:] += dpre.T @ acts[l - 1]
            st.grad(f"{p}layer{l}.b")[:] += dpre.sum(axis=0)
            dlast = dpre @ st[f"{p}layer{l}.W"]
        d = self.dim
        scatter_rows(st.grad(p + "U"), users, dlast[:, :d])
        scatter_rows(st.grad(p + "V"), items, dlast[:, d:])

    def reg_rows(self, users, pos_items, neg_items, contexts=None, masks=None) -> dict[str, np.ndarray]:
        return {self.prefix + "U": np.unique(users),
                self.prefix + "V": np.unique(np.concatenate([pos_items, neg_items]))}

    def embedding_names(self) -> list[str]:
        return [self.prefix + "U", self.prefix + "V"]

    def config(self) -> dict:
        return {"kind": "sdp", "num_users": self.num_users, "num_items": self.num_items,
                "dim": self.dim, "layers": self.layers, "activation": self.activation}


def sdp_forward(model: SDP, user: int, item: int) -> tuple[float, np.ndarray]:
    """Score one (user, item) pair; returns the score and the squared last layer."""
    score, cache = model.forward(np.array([user]), np.array([item]))
    return float(score[0]), cache[3][0].copy()
