import numpy as np
import pytest

from conftest import spread_embeddings
from sdmrec.numkit import RngStream, finite_diff_check
from sdmrec.sdm import SDM
from sdmrec.sdmr import SDMR, fuse_forward, weighted_sum_combine
from sdmrec.sdp import SDP
from sdmrec.train import bpr_loss


def test_fuse_examples():
    e1, e2 = np.array([0.3, 0.1]), np.array([0.5, 0.0, 2.0])
    assert fuse_forward(np.zeros(5), 1.0, e1, e2) == 1.0
    assert fuse_forward(np.zeros(5), -1.0, e1, e2) == 0.0
    w = np.array([1.0, -2.0, 0.5, 3.0, -0.25])
    assert fuse_forward(w, 0.2, e1, e2) == max(0.0, w @ np.r_[e1, e2] + 0.2)
    with pytest.raises(ValueError):
        fuse_forward(np.zeros(4), 0.0, e1, e2)


def test_weighted_sum_examples():
    assert weighted_sum_combine(0.0, 2.0, 4.0) == 4.0
    assert weighted_sum_combine(1.0, 2.0, 4.0) == 2.0
    assert weighted_sum_combine(0.5, 2.0, 4.0) == 3.0
    with pytest.raises(ValueError):
        weighted_sum_combine(1.5, 2.0, 4.0)


def _models(b, hops=2):
    sdp = spread_embeddings(SDP(b["M"], b["N"], 4, rng=RngStream(1)))
    sdm = spread_embeddings(SDM(b["M"], b["N"], 4, hops=hops, rng=RngStream(2)))
    return sdp, sdm


def test_fusion_gradients(toy_batch):
    b = toy_batch
    sdp, sdm = _models(b)
    m = SDMR(sdp, sdm, rng=RngStream(3))
    m.store["sdmr.w_u"][:] = np.random.default_rng(0).normal(size=8)
    half = len(b["users"]) // 2
    # keep every pre-activation well away from the ReLU kink
    x = np.concatenate(m.upstream(b["users"], b["items"], b["contexts"], b["masks"]), axis=1)
    pre = x @ m.store["sdmr.w_u"] + m.store["sdmr.b_u"][0]
    m.store["sdmr.b_u"][0] += 1.0 - pre.min() if np.abs(pre).min() < 1e-3 else 0.0

    def loss(store):
        sc, cache = m.forward(b["users"], b["items"], b["contexts"], b["masks"])
        val, dp, dn = bpr_loss(sc[:half], sc[half:], "distance")
        m.backward(cache, np.r_[dp, dn])
        return val

    rep = finite_diff_check(loss, m.store)
    assert rep.passed, str(rep)


def test_fusion_output_nonnegative_and_sdp_fallback(toy_batch):
    b = toy_batch
    sdp, sdm = _models(b)
    m = SDMR(sdp, sdm, rng=RngStream(3))
    m.store["sdmr.b_u"][0] = -0.5
    masks = b["masks"].copy()
    masks[0] = False
    s = m.score(b["users"], b["items"], b["contexts"], masks)
    assert m.sdp_only_count == 1
    assert s[0] == sdp.score(b["users"][:1], b["items"][:1])[0]
    assert np.all(s[1:] >= 0)


def test_weighted_mode_endpoints(toy_batch):
    b = toy_batch
    sdp, sdm = _models(b)
    args = (b["users"], b["items"], b["contexts"], b["masks"])
    assert np.array_equal(SDMR(sdp, sdm, mode="weighted", beta=0.0).score(*args), sdm.score(*args))
    assert np.array_equal(SDMR(sdp, sdm, mode="weighted", beta=1.0).score(*args), sdp.score(*args[:2]))


def test_upstream_stores_are_separate(toy_batch):
    sdp, sdm = _models(toy_batch)
    m = SDMR(sdp, sdm)
    assert m.store.names() == ["sdmr.b_u", "sdmr.w_u"]


def test_mismatched_upstream_rejected():
    with pytest.raises(ValueError):
        SDMR(SDP(3, 5, 2), SDM(3, 6, 2))
