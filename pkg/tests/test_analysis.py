import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdmrec.analysis import (attention_pmi_correlation, compute_pmi, export_attention, pearson,
                             pmi_from_pairs, read_attention, write_correlation_summary)
from conftest import ML100K
from sdmrec.data import Instances, build_context_instances, load_interactions, split_leave_one_out
from sdmrec.numkit import RngStream
from sdmrec.sdm import SDM


def make_instances(users, targets, contexts, masks, pad):
    n = len(users)
    return Instances(np.asarray(users), np.asarray(targets), np.asarray(contexts), np.asarray(masks, bool),
                     np.zeros(n, np.int8), pad)


def test_pmi_ln2_example():
    # j=0 always pairs with k=1; half of D is j=0, half of D has k=1
    t = pmi_from_pairs([0, 0, 2, 3], [1, 1, 4, 5], 6)
    assert t.pmi(0, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert t.count(0, 1) == 2 and t.total == 4
    with pytest.raises(KeyError):
        t.pmi(0, 4)
    assert np.isnan(t.lookup([0], [4])[0])


def test_independent_pairs_have_zero_pmi():
    # every target pairs with every context once
    tg, cx = np.meshgrid(np.arange(4), np.arange(4, 9), indexing="ij")
    t = pmi_from_pairs(tg.ravel(), cx.ravel(), 9)
    assert np.allclose(t.pmi_values(), 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_pair_counts_match_brute_force(pairs):
    t, c = zip(*pairs)
    table = pmi_from_pairs(t, c, 6)
    D = len(pairs)
    for j, k in set(pairs):
        n_jk = pairs.count((j, k))
        n_j = sum(1 for a, _ in pairs if a == j)
        n_k = sum(1 for _, b in pairs if b == k)
        assert table.count(j, k) == n_jk
        assert table.pmi(j, k) == pytest.approx(math.log(n_jk * D / (n_j * n_k)), abs=1e-12)


def test_compute_pmi_uses_unmasked_slots():
    inst = make_instances([0, 0], [1, 2], [[3, 4], [5, 3]], [[True, True], [False, True]], 6)
    t = compute_pmi(inst)
    assert t.total == 3
    assert t.count(2, 5) == 0 and t.count(2, 3) == 1


def test_pearson_properties():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1) == (pytest.approx(1.0), False)
    assert pearson(x, -x)[0] == pytest.approx(-1.0)
    assert pearson(x, np.ones(10)) == (0.0, True)
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=40), rng.normal(size=40)
    assert pearson(3 * a + 2, 0.5 * b - 1)[0] == pytest.approx(pearson(a, b)[0], abs=1e-12)
    with pytest.raises(ValueError):
        pearson([1.0], [2.0])


def toy_model(hops, N=12):
    return SDM(4, N, 4, hops=hops, rng=RngStream(9))


def test_export_single_context_weight_is_one(tmp_path):
    m = toy_model(3)
    inst = make_instances([0, 1], [2, 3], [[12, 12, 5], [12, 12, 7]], [[False, False, True]] * 2, 12)
    n = export_attention(m, inst, tmp_path / "a.csv")
    rows = read_attention(tmp_path / "a.csv")
    assert n == len(rows) == 2 * 3
    assert all(r["weight"] == 1.0 for r in rows)


def test_export_rows_and_normalisation(tmp_path):
    m = toy_model(2)
    inst = make_instances([0, 1, 2], [2, 3, 4], [[5, 6, 7], [12, 8, 9], [12, 12, 12]],
                          [[True] * 3, [False, True, True], [False] * 3], 12)
    n = export_attention(m, inst, tmp_path / "a.csv")
    rows = read_attention(tmp_path / "a.csv")
    # instance 0: 3 slots x 2 hops, instance 1: 2 x 2, instance 2 has no context
    assert n == len(rows) == 10
    sums = {}
    for r in rows:
        key = (r["user"], r["hop"])
        sums[key] = sums.get(key, 0.0) + r["weight"]
    assert all(abs(v - 1.0) <= 1e-9 for v in sums.values())
    assert {r["item"] for r in rows} <= {"5", "6", "7", "8", "9"}


def test_correlation_and_summary(tmp_path):
    rng = np.random.default_rng(1)
    n, N = 60, 12
    ctx = rng.integers(0, N, (n, 3))
    inst = make_instances(rng.integers(0, 4, n), rng.integers(0, N, n), ctx, np.ones((n, 3), bool), N)
    m = toy_model(2)
    pmi = compute_pmi(inst)
    res = [attention_pmi_correlation(m, inst, pmi, h, scatter_path=tmp_path / f"s{h}.csv") for h in (1, 2)]
    assert all(-1.0 <= r.pearson_r <= 1.0 and r.n_pairs == 3 * n for r in res)
    assert (tmp_path / "s1.csv").read_text().startswith("target,context,pmi,attention")
    text = write_correlation_summary(tmp_path / "c.tsv", res).read_text().splitlines()
    assert text[0] == "hop\tpearson_r\tn_pairs\tzero_variance" and len(text) == 3
    with pytest.raises(ValueError):
        attention_pmi_correlation(m, inst, pmi, 3)


@pytest.mark.skipif(not ML100K.exists(), reason="ML-100k not available")
def test_ml100k_pmi_table_matches_brute_force_counts():
    bundle = split_leave_one_out(load_interactions(ML100K), RngStream(42))
    inst = build_context_instances(bundle, 5)
    table = compute_pmi(inst, bundle.num_items)
    pairs, tcount, ccount = Counter(), Counter(), Counter()
    for r in range(len(inst)):
        if inst.splits[r] != 0:
            continue
        j = int(inst.targets[r])
        for k, m in zip(inst.contexts[r].tolist(), inst.masks[r].tolist()):
            if m:
                pairs[j, k] += 1
                tcount[j] += 1
                ccount[k] += 1
    D = sum(pairs.values())
    assert table.total == D and len(table) == len(pairs)
    keys = list(pairs)
    t = np.array([j for j, _ in keys])
    c = np.array([k for _, k in keys])
    expect = np.array([math.log(pairs[p] * D / (tcount[p[0]] * ccount[p[1]])) for p in keys])
    assert np.allclose(table.lookup(t, c), expect, rtol=0, atol=1e-12)
