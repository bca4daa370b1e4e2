"""Signed Distance-based Memory network.

Input memory (Ui, Vi) drives a metric attention over the context items, the
output memory (Uo, Vo) produces per-item squared distance vectors that the
attention mixes. Multiple hops refine the query through a sigmoid gate. All
weights are shared across hops.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .numkit import (ParameterStore, RngStream, glorot_uniform, masked_softmin,
                     masked_softmin_backward, sigmoid)
from .sdp import ACTIVATIONS, activate, activate_grad, scatter_rows

MEMORIES = ("Ui", "Vi", "Uo", "Vo")


def _slot_sum(x: np.ndarray) -> np.ndarray:
    """Sum over axis 1 in fixed sequential order (zeros from masked slots add exactly)."""
    out = x[:, 0].copy()
    for k in range(1, x.shape[1]):
        out += x[:, k]
    return out


def _segment_matrix(index: np.ndarray, n_groups: int) -> sp.csr_matrix:
    """One-hot (n_groups x rows) matrix; left-multiplying sums rows per group."""
    rows = len(index)
    return sp.csr_matrix((np.ones(rows), (index, np.arange(rows))), shape=(n_groups, rows))


class SDM:
    polarity = "distance"
    needs_context = True
    prefix = "sdm."

    def __init__(self, num_users: int, num_items: int, dim: int, *, hops: int = 1,
                 activation: str = "tanh", rng: RngStream | None = None,
                 store: ParameterStore | None = None) -> None:
        if hops < 1:
            raise ValueError("hops must be >= 1")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.num_users, self.num_items, self.dim = num_users, num_items, dim
        self.hops, self.activation = hops, activation
        if store is None:
            rng = rng or RngStream(0)
            store = ParameterStore()
            p = self.prefix
            for name in MEMORIES:
                rows = num_users if name.startswith("U") else num_items + 1
                table = rng.gaussian(0.0, 0.01, size=(rows, dim))
                if name.startswith("V"):
                    table[num_items] = 0.0
                store.add(p + name, table)
            for w in "abcd":
                store.add(f"{p}W{w}", glorot_uniform(rng, dim, 2 * dim))
                store.add(f"{p}b{w}", np.zeros(dim))
            store.add(p + "Wg", glorot_uniform(rng, dim, dim))
            store.add(p + "bg", np.zeros(dim))
            store.add(p + "we", glorot_uniform(rng, 1, dim).reshape(dim))
            store.add(p + "be", np.zeros(1))
        self.store = store

    @property
    def pad(self) -> int:
        return self.num_items

    def _w(self, name: str) -> np.ndarray:
        return self.store[self.prefix + name]

    def _g(self, name: str) -> np.ndarray:
        return self.store.grad(self.prefix + name)

    # ------------------------------------------------------------------ forward

    def forward(self, users, items, contexts, masks, ctx_index=None):
        """Batched scores.

        `contexts`/`masks` are either one row per (user, item) pair or, with
        `ctx_index`, a table of distinct contexts that row b reads from entry
        ctx_index[b]. Context-only terms are then computed once per entry.
        """
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        contexts = np.asarray(contexts, dtype=np.int64)
        masks = np.asarray(masks, dtype=bool)
        if ctx_index is None:
            ctx_index = np.arange(len(users))
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range (PAD is not a valid candidate)")
        if contexts.size and (contexts.min() < 0 or contexts.max() > self.num_items):
            raise IndexError("context index out of range")
        if not masks.any(axis=1).all():
            raise ValueError("instance without any unmasked context item; score it with SDP")
        f, d = self.activation, self.dim
        Wa, Wb, Wc, Wd, Wg = (self._w(n) for n in ("Wa", "Wb", "Wc", "Wd", "Wg"))
        n_ctx, s = contexts.shape
        # Canonical slot order (real items ascending, masked slots last) and
        # per-item projections taken from whole-table products: the result is
        # then bit-for-bit independent of context order and of extra padding.
        order = np.argsort(np.where(masks, contexts, self.num_items + 1), axis=1, kind="stable")
        contexts = np.take_along_axis(contexts, order, axis=1)
        masks = np.take_along_axis(masks, order, axis=1)

        xa = np.concatenate([self._w("Ui")[users], self._w("Vi")[items]], axis=1)
        q = activate(f, xa @ Wa.T + self._w("ba"))
        xb = np.concatenate([self._w("Uo")[users], self._w("Vo")[items]], axis=1)
        pq = activate(f, xb @ Wb.T + self._w("bb"))

        cv = (self._w("Vi") @ Wc[:, d:].T)[contexts] + self._w("bc")
        rv = (self._w("Vo") @ Wd[:, d:].T)[contexts] + self._w("bd")
        cv, rv, row_masks = cv[ctx_index], rv[ctx_index], masks[ctx_index]
        r = activate(f, (pq @ Wd[:, :d].T)[:, None, :] + rv)
        rsq = r * r

        qs, cs, attn, es, gs = [q], [], [], [], []
        for t in range(self.hops):
            c = activate(f, (qs[t] @ Wc[:, :d].T)[:, None, :] + cv)
            a = masked_softmin((c * c).sum(axis=-1), row_masks)
            e = _slot_sum(a[:, :, None] * rsq)
            cs.append(c); attn.append(a); es.append(e)
            if t < self.hops - 1:
                g = sigmoid(qs[t] @ Wg.T + self._w("bg"))
                gs.append(g)
                qs.append((1.0 - g) * e + g * qs[t])
        score = es[-1] @ self._w("we") + self._w("be")[0]
        cache = dict(users=users, items=items, contexts=contexts, masks=masks, ctx_index=ctx_index,
                     order=order, xa=xa, xb=xb, q=qs, pq=pq, r=r, rsq=rsq, c=cs, a=attn, e=es, g=gs)
        return score, cache

    @staticmethod
    def attention_from_cache(cache) -> np.ndarray:
        """Attention (batch, hops, slots) in the caller's slot order."""
        a = np.stack(cache["a"], axis=1)
        out = np.empty_like(a)
        order = cache["order"][cache["ctx_index"]]
        np.put_along_axis(out, np.broadcast_to(order[:, None, :], a.shape), a, axis=2)
        return out

    def score(self, users, items, contexts, masks, ctx_index=None) -> np.ndarray:
        return self.forward(users, items, contexts, masks, ctx_index)[0]

    def features(self, users, items, contexts, masks, ctx_index=None) -> np.ndarray:
        """Final-hop distance vector e^(h) (non-negative, width d)."""
        return self.forward(users, items, contexts, masks, ctx_index)[1]["e"][-1]

    def attention(self, users, items, contexts, masks) -> np.ndarray:
        """Attention weights, shape (batch, hops, slots)."""
        return self.attention_from_cache(self.forward(users, items, contexts, masks)[1])

    # ----------------------------------------------------------------- backward

    def backward(self, cache, dscore: np.ndarray) -> None:
        f, d = self.activation, self.dim
        Wa, Wb, Wc, Wd, Wg = (self._w(n) for n in ("Wa", "Wb", "Wc", "Wd", "Wg"))
        qs, cs, attn, es, gs = cache["q"], cache["c"], cache["a"], cache["e"], cache["g"]
        rsq = cache["rsq"]
        n_ctx, s = cache["contexts"].shape
        group = _segment_matrix(cache["ctx_index"], n_ctx)

        self._g("we")[:] += es[-1].T @ dscore
        self._g("be")[0] += dscore.sum()
        de_final = dscore[:, None] * self._w("we")[None, :]

        gWc, gbc, gWg, gbg = self._g("Wc"), self._g("bc"), self._g("Wg"), self._g("bg")
        drsq = np.zeros_like(rsq)
        dcv = np.zeros_like(rsq)  # gradient w.r.t. the pre-activation of the attention layer
        dq = None  # gradient w.r.t. q at hop t+1
        for t in range(self.hops - 1, -1, -1):
            if t == self.hops - 1:
                de = de_final
                dq_t = np.zeros_like(qs[t])
            else:
                g = gs[t]
                de = (1.0 - g) * dq
                dq_t = g * dq
                dpre_g = (qs[t] - es[t]) * dq * g * (1.0 - g)
                gWg += dpre_g.T @ qs[t]
                gbg += dpre_g.sum(axis=0)
                dq_t += dpre_g @ Wg
            a = attn[t]
            da = (rsq @ de[:, :, None])[:, :, 0]
            drsq += a[:, :, None] * de[:, None, :]
            dz = masked_softmin_backward(a, da)
            c = cs[t]
            dpre_c = activate_grad(f, c)
            dpre_c *= c
            dpre_c *= 2.0 * dz[:, :, None]
            dpre_sum = dpre_c.sum(axis=1)
            gWc[:, :d] += dpre_sum.T @ qs[t]
            dq_t += dpre_sum @ Wc[:, :d]
            dcv += dpre_c
            dq = dq_t
        gbc += dcv.sum(axis=(0, 1))
        dcv_ctx = (group @ dcv.reshape(len(dcv), -1)).reshape(n_ctx * s, d)

        # output memory path
        r = cache["r"]
        dpre_d = activate_grad(f, r)
        dpre_d *= r
        dpre_d *= 2.0 * drsq
        dpre_d_sum = dpre_d.sum(axis=1)
        pq = cache["pq"]
        self._g("Wd")[:, :d] += dpre_d_sum.T @ pq
        self._g("bd")[:] += dpre_d_sum.sum(axis=0)
        drv_ctx = (group @ dpre_d.reshape(len(dpre_d), -1)).reshape(n_ctx * s, d)
        dpq = dpre_d_sum @ Wd[:, :d]

        dpre_b = dpq * activate_grad(f, pq)
        self._g("Wb")[:] += dpre_b.T @ cache["xb"]
        self._g("bb")[:] += dpre_b.sum(axis=0)
        dxb = dpre_b @ Wb

        dpre_a = dq * activate_grad(f, qs[0])
        self._g("Wa")[:] += dpre_a.T @ cache["xa"]
        self._g("ba")[:] += dpre_a.sum(axis=0)
        dxa = dpre_a @ Wa

        users, items = cache["users"], cache["items"]
        ctx_flat, mask_flat = cache["contexts"].reshape(-1), cache["masks"].reshape(-1)
        scatter_rows(self._g("Ui"), users, dxa[:, :d])
        scatter_rows(self._g("Vi"), items, dxa[:, d:])
        scatter_rows(self._g("Uo"), users, dxb[:, :d])
        scatter_rows(self._g("Vo"), items, dxb[:, d:])
        # context items: sum per item, then through the item half of Wc / Wd.
        # PAD slots are skipped so the PAD rows never see a gradient.
        live = ctx_flat[mask_flat]
        touched = np.unique(live)
        for mem, W, dproj in (("Vi", "Wc", dcv_ctx), ("Vo", "Wd", drv_ctx)):
            acc = np.zeros((self.num_items + 1, d))
            scatter_rows(acc, live, dproj[mask_flat])
            acc = acc[touched]
            self._g(W)[:, d:] += acc.T @ self._w(mem)[touched]
            self._g(mem)[touched] += acc @ self._w(W)[:, d:]

    def reg_rows(self, users, pos_items, neg_items, contexts, masks) -> dict[str, np.ndarray]:
        p = self.prefix
        u = np.unique(users)
        v = np.unique(np.concatenate([pos_items, neg_items, np.asarray(contexts)[np.asarray(masks)]]))
        return {p + "Ui": u, p + "Uo": u, p + "Vi": v, p + "Vo": v}

    def embedding_names(self) -> list[str]:
        return [self.prefix + n for n in MEMORIES]

    def config(self) -> dict:
        return {"kind": "sdm", "num_users": self.num_users, "num_items": self.num_items,
                "dim": self.dim, "hops": self.hops, "activation": self.activation}


# --------------------------------------------------------------------------
# single-instance operations
# --------------------------------------------------------------------------

def input_query(model: SDM, user: int, item: int) -> tuple[np.ndarray, np.ndarray]:
    """(q, p): the input-memory query and the output-memory query."""
    if not (0 <= user < model.num_users and 0 <= item < model.num_items):
        raise IndexError("index out of range")
    f = model.activation
    q = activate(f, model._w("Wa") @ np.concatenate([model._w("Ui")[user], model._w("Vi")[item]])
                 + model._w("ba"))
    p = activate(f, model._w("Wb") @ np.concatenate([model._w("Uo")[user], model._w("Vo")[item]])
                 + model._w("bb"))
    return q, p


def attention_scores(model: SDM, q: np.ndarray, context, mask=None) -> np.ndarray:
    """Softmax of negated squared distances between the query and each context item."""
    context = np.asarray(context, dtype=np.int64)
    mask = np.ones(len(context), bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("all context slots are masked")
    d, W = model.dim, model._w("Wc")
    c = activate(model.activation,
                 (W[:, :d] @ q)[None, :] + model._w("Vi")[context] @ W[:, d:].T + model._w("bc"))
    return masked_softmin((c * c).sum(axis=1), mask)


def output_distance(model: SDM, p: np.ndarray, a: np.ndarray, context, mask=None) -> tuple[float, np.ndarray]:
    context = np.asarray(context, dtype=np.int64)
    a = np.asarray(a, dtype=np.float64)
    if mask is not None:
        a = np.where(np.asarray(mask, dtype=bool), a, 0.0)
    d, W = model.dim, model._w("Wd")
    r = activate(model.activation,
                 (W[:, :d] @ p)[None, :] + model._w("Vo")[context] @ W[:, d:].T + model._w("bd"))
    e = (a[:, None] * r * r).sum(axis=0)
    return float(e @ model._w("we") + model._w("be")[0]), e


def hop_update(model: SDM, q_prev: np.ndarray, e_prev: np.ndarray) -> np.ndarray:
    g = sigmoid(model._w("Wg") @ q_prev + model._w("bg"))
    return (1.0 - g) * e_prev + g * q_prev


def sdm_forward(model: SDM, user: int, item: int, context, mask=None) -> tuple[float, np.ndarray, np.ndarray]:
    """Score one instance. Returns (score, final-hop e, attention matrix hops x slots)."""
    context = np.asarray(context, dtype=np.int64)
    mask = np.ones(len(context), bool) if mask is None else np.asarray(mask, dtype=bool)
    score, cache = model.forward(np.array([user]), np.array([item]), context[None, :], mask[None, :])
    attn = model.attention_from_cache(cache)[0]
    return float(score[0]), cache["e"][-1][0].copy(), attn
