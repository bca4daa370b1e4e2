import numpy as np
import pytest

from sdmrec.baselines import CML, MFBPR, ItemKNN, cml_score, cosine, itemknn_score, mfbpr_score
from sdmrec.data import DatasetBundle
from sdmrec.numkit import RngStream, finite_diff_check
from sdmrec.train import bpr_loss, regularize


def bundle_from_rows(rows, num_users, num_items):
    seqs = [np.array([i for u, i in rows if u == x], dtype=np.int64) for x in range(num_users)]
    return DatasetBundle(num_users, num_items, seqs, [np.zeros(len(s), np.int64) for s in seqs],
                         np.full(num_users, -1), np.full(num_users, -1), [str(u) for u in range(num_users)],
                         [str(i) for i in range(num_items)])


def test_cosine_examples():
    assert cosine(np.array([1.0, 0, 1, 1]), np.array([1.0, 0, 1, 1])) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 1, 0, 0]), np.array([0.0, 0, 1, 1])) == 0.0
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_itemknn_hand_computed():
    # 4 users x 3 items
    R = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=float)
    rows = [(u, i) for u in range(4) for i in range(3) if R[u, i]]
    m = ItemKNN(bundle_from_rows(rows, 4, 3))
    cos = lambda a, b: R[:, a] @ R[:, b] / np.sqrt(R[:, a].sum() * R[:, b].sum())
    # user 0 consumed items 0 and 1; score for item 2
    assert itemknn_score(m, 0, 2) == pytest.approx(cos(2, 0) + cos(2, 1), abs=1e-15)
    assert itemknn_score(m, 1, 1) == pytest.approx(cos(1, 0) + cos(1, 2), abs=1e-15)


def test_itemknn_cold_item_scores_zero():
    m = ItemKNN(bundle_from_rows([(0, 0), (1, 1)], 2, 3))
    assert itemknn_score(m, 0, 2) == 0.0


def test_mfbpr_and_cml_examples():
    mf = MFBPR(1, 1, 2)
    mf.store["mf.U"][0] = [1, 0]
    mf.store["mf.V"][0] = [0, 1]
    assert mfbpr_score(mf, 0, 0) == 0.0
    mf.store["mf.U"][0] = [1, 1]
    mf.store["mf.V"][0] = [1, 1]
    assert mfbpr_score(mf, 0, 0) == 2.0
    cml = CML(1, 1, 2)
    cml.store["cml.U"][0] = [0, 0]
    cml.store["cml.V"][0] = [3, 4]
    assert cml_score(cml, 0, 0) == 25.0
    cml.store["cml.U"][0] = [3, 4]
    assert cml_score(cml, 0, 0) == 0.0


def test_cml_symmetric_nonnegative():
    rng = np.random.default_rng(0)
    a = CML(5, 5, 3, rng=RngStream(1))
    a.store["cml.U"][:] = rng.normal(size=(5, 3))
    a.store["cml.V"][:5] = rng.normal(size=(5, 3))
    b = CML(5, 5, 3)
    b.store["cml.U"][:] = a.store["cml.V"][:5]
    b.store["cml.V"][:5] = a.store["cml.U"]
    u = np.arange(5)
    assert np.array_equal(a.score(u, u), b.score(u, u))
    assert np.all(a.score(u, u) >= 0)


@pytest.mark.parametrize("cls", [MFBPR, CML])
@pytest.mark.parametrize("lam", [0.0, 0.01])
def test_embedding_gradients(toy_batch, cls, lam):
    b = toy_batch
    m = cls(b["M"], b["N"], 4, rng=RngStream(5))
    m.store[m.prefix + "U"][...] *= 30
    m.store[m.prefix + "V"][: b["N"]] *= 30
    half = len(b["users"]) // 2
    u = b["users"][:half]
    pos, neg = b["items"][:half], b["items"][half:]

    def loss(store):
        sc, cache = m.forward(np.r_[u, u], np.r_[pos, neg])
        val, dp, dn = bpr_loss(sc[:half], sc[half:], m.polarity)
        m.backward(cache, np.r_[dp, dn])
        return val + regularize(m, store, m.reg_rows(u, pos, neg), lam)

    rep = finite_diff_check(loss, m.store)
    assert rep.passed, str(rep)


def test_mfbpr_regularizes_users_and_positives_only():
    m = MFBPR(3, 5, 2)
    rows = m.reg_rows(np.array([0, 0]), np.array([1, 2]), np.array([3, 4]))
    assert rows["mf.V"].tolist() == [1, 2]
