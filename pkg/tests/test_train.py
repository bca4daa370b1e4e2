import math

import numpy as np
import pytest

from sdmrec.config import TrainConfig, config_hash, read_config, write_config
from sdmrec.data import NegativeSampler, build_context_instances, load_interactions, split_leave_one_out
from sdmrec.numkit import RngStream
from sdmrec.train import (bpr_loss, build_model, pretrain_and_fuse, regularize, train_epoch, train_model,
                          training_rows)


def test_bpr_equal_scores_is_ln2():
    loss, dp, dn = bpr_loss([1.0], [1.0], "distance")
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert dp[0] == pytest.approx(0.5) and dn[0] == pytest.approx(-0.5)
    loss, dp, dn = bpr_loss([1.0], [1.0], "similarity")
    assert dp[0] == pytest.approx(-0.5)


def test_bpr_saturation_is_finite():
    loss, dp, dn = bpr_loss([0.0], [1000.0], "distance")
    assert loss == pytest.approx(0.0, abs=1e-300) and np.isfinite(dp).all()
    loss, _, _ = bpr_loss([1000.0], [0.0], "distance")
    assert loss == pytest.approx(1000.0)


def test_bpr_reg_term_added():
    assert bpr_loss([0.0], [0.0], "distance", reg_term=2.0)[0] == pytest.approx(math.log(2) + 2.0)
    with pytest.raises(ValueError):
        bpr_loss([0.0], [0.0], "up")


def test_zero_lambda_leaves_gradients(toy_bundle):
    m = build_model("mfbpr", toy_bundle, TrainConfig(dim=4))
    before = m.store.grad("mf.U").copy()
    assert regularize(m, m.store, {"mf.U": np.array([0])}, 0.0) == 0.0
    assert np.array_equal(before, m.store.grad("mf.U"))


def test_zero_learning_rate_keeps_parameters(toy_bundle, toy_instances):
    cfg = TrainConfig(dim=4, hops=2, learning_rate=0.0, batch_size=16)
    for kind in ("sdp", "sdm", "mfbpr"):
        m = build_model(kind, toy_bundle, cfg)
        before = m.store.value_bytes()
        train = training_rows(kind, toy_instances.split("train"))
        train_epoch(m, train, NegativeSampler(toy_bundle), cfg, RngStream(0))
        assert m.store.value_bytes() == before


def planted_log(tmp_path):
    """20 users, 30 items in two blocks; each user only consumes items of its own block."""
    rng = np.random.default_rng(0)
    path = tmp_path / "planted.data"
    with open(path, "w") as fh:
        for u in range(20):
            lo = 0 if u < 10 else 15
            for t, i in enumerate(rng.choice(np.arange(lo, lo + 15), 8, replace=False)):
                fh.write(f"{u + 1}\t{i + 1}\t5\t{t}\n")
    return load_interactions(path)


@pytest.mark.parametrize("kind", ["sdp", "sdm", "mfbpr", "cml"])
def test_loss_decreases_on_planted_blocks(tmp_path, kind):
    bundle = split_leave_one_out(planted_log(tmp_path), RngStream(1))
    assert (bundle.num_users, bundle.num_items) == (20, 30)
    inst = build_context_instances(bundle, 5)
    cfg = TrainConfig(dim=8, hops=2, lambda_reg=0.0)
    m = build_model(kind, bundle, cfg)
    rng, sampler = RngStream(2), NegativeSampler(bundle)
    train = training_rows(kind, inst.split("train"))
    losses = [train_epoch(m, train, sampler, cfg, rng).mean_loss for _ in range(5)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


@pytest.mark.parametrize("kind", ["sdp", "sdm", "mfbpr", "cml"])
def test_planted_blocks_are_learned(tmp_path, kind):
    bundle = split_leave_one_out(planted_log(tmp_path), RngStream(1))
    inst = build_context_instances(bundle, 5)
    cfg = TrainConfig(dim=8, hops=2, batch_size=16, learning_rate=0.01, lambda_reg=0.0)
    m = build_model(kind, bundle, cfg)
    rng, sampler = RngStream(2), NegativeSampler(bundle)
    train = training_rows(kind, inst.split("train"))
    losses = [train_epoch(m, train, sampler, cfg, rng).mean_loss for _ in range(8)]
    assert losses[-1] < 0.6 * losses[0], losses


def test_training_is_deterministic(toy_bundle, toy_instances):
    cfg = TrainConfig(dim=4, hops=2, epochs=2, batch_size=32)
    a, ra = train_model("sdm", toy_bundle, toy_instances, cfg)
    b, rb = train_model("sdm", toy_bundle, toy_instances, cfg)
    assert a.store.value_bytes() == b.store.value_bytes()
    assert [s.mean_loss for s in ra.history[1:]] == [s.mean_loss for s in rb.history[1:]]


def test_fit_keeps_best_dev_epoch(toy_bundle, toy_instances):
    cfg = TrainConfig(dim=4, epochs=4, patience=1, batch_size=32)
    _, res = train_model("sdp", toy_bundle, toy_instances, cfg)
    best = max((s.dev_hit, s.dev_ndcg) for s in res.history)
    assert (res.best_dev_hit, res.best_dev_ndcg) == best
    assert res.history[0].epoch == 0


def test_stage_order_and_frozen_upstream(toy_bundle, toy_instances):
    cfg = TrainConfig(dim=4, hops=1, epochs=2, batch_size=32)
    seen = []
    stages = pretrain_and_fuse(toy_bundle, toy_instances, cfg, on_epoch=lambda name, st: seen.append(name))
    assert [s.name for s in stages] == ["sdp", "sdm", "sdmr"]
    assert seen == sorted(seen, key=["sdp", "sdm", "sdmr"].index)
    sdp, sdm, fused = (s.model for s in stages)
    # retraining the fusion must leave both upstream models untouched
    snap = sdp.store.value_bytes(), sdm.store.value_bytes()
    train_model("sdmr", toy_bundle, toy_instances, cfg, sdp=sdp, sdm=sdm)
    assert (sdp.store.value_bytes(), sdm.store.value_bytes()) == snap


def test_config_roundtrip_and_hash(tmp_path):
    vals = {"dim": 64, "lambda_reg": 1e-4, "model": "sdm"}
    assert {k: str(v) for k, v in vals.items()} == read_config(write_config(tmp_path / "c.txt", vals))
    assert config_hash(vals) == config_hash(dict(reversed(list(vals.items()))))
    assert config_hash(vals) != config_hash({**vals, "dim": 32})
    assert TrainConfig(dim=7).off_grid() == ["dim=7"]
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
