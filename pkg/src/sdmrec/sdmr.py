"""Fusion of a frozen SDP and a frozen SDM into one ranking score."""
from __future__ import annotations

import numpy as np

from .numkit import ParameterStore, RngStream, relu
from .sdm import SDM
from .sdp import SDP

FUSION_MODES = ("learned", "weighted")


def fuse_forward(w_u: np.ndarray, b_u: float, e_sdp: np.ndarray, e_sdm: np.ndarray) -> float:
    x = np.concatenate([np.asarray(e_sdp, float), np.asarray(e_sdm, float)])
    if x.shape != np.shape(w_u):
        raise ValueError(f"fusion weight has shape {np.shape(w_u)}, features have {x.shape}")
    return float(relu(x @ w_u + b_u))


def weighted_sum_combine(beta: float, o_sdp, o_sdm):
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return beta * o_sdp + (1.0 - beta) * o_sdm


class SDMR:
    """ReLU(w_u . [e_sdp; e_sdm] + b_u), or beta-weighted score sum in "weighted" mode.

    Only sdmr.* parameters live in this model's store; the SDP and SDM passed
    in are read and never updated. Instances without any context are scored
    by the SDP alone.
    """

    polarity = "distance"
    needs_context = True
    prefix = "sdmr."

    def __init__(self, sdp: SDP, sdm: SDM, *, mode: str = "learned", beta: float = 0.5,
                 rng: RngStream | None = None, store: ParameterStore | None = None) -> None:
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        if sdp.num_items != sdm.num_items or sdp.num_users != sdm.num_users:
            raise ValueError("SDP and SDM were trained on different id spaces")
        self.sdp, self.sdm, self.mode, self.beta = sdp, sdm, mode, beta
        self.num_users, self.num_items = sdp.num_users, sdp.num_items
        self.width = sdp.dim + sdm.dim
        if store is None:
            rng = rng or RngStream(0)
            store = ParameterStore()
            store.add(self.prefix + "w_u", rng.gaussian(0.0, 0.01, size=self.width))
            store.add(self.prefix + "b_u", np.ones(1))
        if store[self.prefix + "w_u"].shape != (self.width,):
            raise ValueError("fusion weight length does not match upstream feature widths")
        self.store = store
        self.sdp_only_count = 0

    @property
    def pad(self) -> int:
        return self.num_items

    def warm_start(self, sample_scores: np.ndarray, margin: float = 1.0) -> None:
        """Start from the SDM's own scoring rule, shifted so the ReLU is open on `sample_scores`."""
        w = self.store[self.prefix + "w_u"]
        w[:] = 0.0
        w[self.sdp.dim:] = self.sdm.store["sdm.we"]
        shift = max(0.0, -float(np.min(sample_scores))) + margin
        self.store[self.prefix + "b_u"][0] = self.sdm.store["sdm.be"][0] + shift

    def upstream(self, users, items, contexts, masks, ctx_index=None) -> tuple[np.ndarray, np.ndarray]:
        return (self.sdp.features(users, items),
                self.sdm.features(users, items, contexts, masks, ctx_index))

    def forward(self, users, items, contexts, masks, ctx_index=None):
        e_sdp, e_sdm = self.upstream(users, items, contexts, masks, ctx_index)
        x = np.concatenate([e_sdp, e_sdm], axis=1)
        pre = x @ self.store[self.prefix + "w_u"] + self.store[self.prefix + "b_u"][0]
        return relu(pre), (x, pre)

    def backward(self, cache, dscore: np.ndarray) -> None:
        x, pre = cache
        dpre = np.where(pre > 0.0, dscore, 0.0)
        self.store.grad(self.prefix + "w_u")[:] += x.T @ dpre
        self.store.grad(self.prefix + "b_u")[0] += dpre.sum()

    def score(self, users, items, contexts, masks) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        masks = np.asarray(masks, dtype=bool)
        out = np.empty(len(users))
        has_ctx = masks.any(axis=1)
        alone = ~has_ctx
        self.sdp_only_count = int(alone.sum())
        if alone.any():
            out[alone] = self.sdp.score(users[alone], items[alone])
        if has_ctx.any():
            sel = np.flatnonzero(has_ctx)
            args = (users[sel], items[sel], np.asarray(contexts)[sel], masks[sel])
            if self.mode == "weighted":
                out[sel] = weighted_sum_combine(self.beta, self.sdp.score(*args[:2]), self.sdm.score(*args))
            else:
                out[sel] = self.forward(*args)[0]
        return out

    def reg_rows(self, *args) -> dict[str, np.ndarray]:
        return {}

    def embedding_names(self) -> list[str]:
        return []

    def config(self) -> dict:
        return {"kind": "sdmr", "mode": self.mode, "beta": self.beta, "width": self.width}
