"""BPR training with uniform negatives, dev-based early stopping and staged fusion."""
from __future__ import annotations

import dataclasses
import logging
import time
from typing import Callable

import numpy as np

from .config import TrainConfig
from .data import DatasetBundle, Instances, NegativeSampler
from .evaluation import evaluate_instances, evaluation_negatives
from .numkit import AdamConfig, NumericError, ParameterStore, RngStream, adam_step, log_sigmoid, sigmoid
from .sdm import SDM
from .sdmr import SDMR
from .sdp import SDP

log = logging.getLogger(__name__)

# child-stream tags, so every stage draws from its own deterministic stream
_INIT_TAG = {"sdp": 1, "sdm": 2, "sdmr": 3, "mfbpr": 4, "cml": 5}
_TRAIN_TAG = {k: v + 10 for k, v in _INIT_TAG.items()}


def bpr_loss(score_pos, score_neg, polarity: str, reg_term: float = 0.0):
    """Summed -log sigma(margin) + reg_term, with gradients w.r.t. both score arrays.

    margin = o_neg - o_pos for distances, s_pos - s_neg for similarities.
    """
    score_pos = np.asarray(score_pos, dtype=np.float64)
    score_neg = np.asarray(score_neg, dtype=np.float64)
    if polarity == "distance":
        margin, sign = score_neg - score_pos, -1.0
    elif polarity == "similarity":
        margin, sign = score_pos - score_neg, 1.0
    else:
        raise ValueError(f"unknown polarity {polarity!r}")
    loss = float(-log_sigmoid(margin).sum() + reg_term)
    dmargin = -sigmoid(-margin)
    return loss, sign * dmargin, -sign * dmargin


def regularize(model, store: ParameterStore, rows: dict[str, np.ndarray], lam: float,
               embeddings_only: bool = False) -> float:
    """Add lam * |theta|^2 over touched embedding rows (+ dense weights) to the gradients."""
    if lam == 0.0:
        return 0.0
    total = 0.0
    emb = set(model.embedding_names())
    for name in store.names():
        if name in emb:
            idx = rows.get(name)
            if idx is None or len(idx) == 0:
                continue
            theta = store[name][idx]
            total += float((theta * theta).sum())
            store.grad(name)[idx] += 2.0 * lam * theta
        elif not embeddings_only:
            theta = store[name]
            total += float((theta * theta).sum())
            store.grad(name)[:] += 2.0 * lam * theta
    return lam * total


@dataclasses.dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    instances_seen: int
    dev_hit: float = float("nan")
    dev_ndcg: float = float("nan")
    seconds: float = 0.0

    def tsv_row(self) -> str:
        return (f"{self.epoch}\t{self.mean_loss:.10f}\t{self.dev_hit:.6f}\t{self.dev_ndcg:.6f}"
                f"\t{self.seconds:.2f}")


RUN_LOG_HEADER = "epoch\tmean_loss\tdev_hit@10\tdev_ndcg@10\tseconds"


def train_epoch(model, train: Instances, sampler: NegativeSampler, cfg: TrainConfig, rng: RngStream,
                adam: AdamConfig | None = None) -> EpochStats:
    """One pass over the training positives in shuffled order, cfg.negatives_per_positive each."""
    adam = adam or AdamConfig(learning_rate=cfg.learning_rate)
    store = model.store
    store.zero_grad()
    n = len(train)
    order = rng.permutation(n)
    k = cfg.negatives_per_positive
    negs = sampler.sample(train.users[order], k, rng).reshape(-1)
    idx = np.repeat(order, k)
    total, seen = 0.0, 0
    for b, lo in enumerate(range(0, len(idx), cfg.batch_size)):
        sel = idx[lo:lo + cfg.batch_size]
        neg = negs[lo:lo + cfg.batch_size]
        users, pos = train.users[sel], train.targets[sel]
        ctx, msk = train.contexts[sel], train.masks[sel]
        m = len(sel)
        # each positive is scored once even though it pairs with several negatives
        uniq, inv = np.unique(sel, return_inverse=True)
        P = len(uniq)
        scores, cache = model.forward(
            np.concatenate([train.users[uniq], users]), np.concatenate([train.targets[uniq], neg]),
            train.contexts[uniq], train.masks[uniq], ctx_index=np.concatenate([np.arange(P), inv]))
        loss, dpos, dneg = bpr_loss(scores[:P][inv], scores[P:], model.polarity)
        model.backward(cache, np.concatenate([np.bincount(inv, weights=dpos, minlength=P), dneg]))
        loss += regularize(model, store, model.reg_rows(users, pos, neg, ctx, msk), cfg.lambda_reg,
                           cfg.reg_embeddings_only)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at batch {b}")
        adam_step(store, adam)
        total += loss
        seen += m
    return EpochStats(0, total / max(seen, 1), seen)


@dataclasses.dataclass
class FitResult:
    history: list[EpochStats]
    best_epoch: int
    best_dev_hit: float
    best_dev_ndcg: float


def fit(model, train: Instances, bundle: DatasetBundle, cfg: TrainConfig, rng: RngStream,
        dev: Instances, dev_negatives: np.ndarray, *, on_epoch: Callable[[EpochStats], None] | None = None,
        sampler: NegativeSampler | None = None) -> FitResult:
    """Train until dev hit@k stops improving for cfg.patience epochs; keep the best parameters.

    Epoch 0 is the untrained model, so a warm start is never made worse on dev.
    """
    sampler = sampler or NegativeSampler(bundle)
    adam = AdamConfig(learning_rate=cfg.learning_rate)
    t0 = time.perf_counter()
    hit, ndcg = evaluate_instances(model, dev, dev_negatives, cfg.eval_k)
    stats0 = EpochStats(0, float("nan"), 0, hit, ndcg, time.perf_counter() - t0)
    history = [stats0]
    if on_epoch:
        on_epoch(stats0)
    best = (hit, ndcg, 0, model.store.copy())
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        st = train_epoch(model, train, sampler, cfg, rng, adam)
        st.epoch = epoch
        st.dev_hit, st.dev_ndcg = evaluate_instances(model, dev, dev_negatives, cfg.eval_k)
        st.seconds = time.perf_counter() - t0
        history.append(st)
        if on_epoch:
            on_epoch(st)
        if (st.dev_hit, st.dev_ndcg) > best[:2]:
            best = (st.dev_hit, st.dev_ndcg, epoch, model.store.copy())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(model.store, best[3])
    return FitResult(history, best[2], best[0], best[1])


def _restore(store: ParameterStore, snapshot: ParameterStore) -> None:
    for name, p in snapshot.items():
        dst = store.param(name)
        dst.value[...] = p.value
        dst.adam_m[...] = p.adam_m
        dst.adam_v[...] = p.adam_v
        dst.grad.fill(0.0)
    store.step_count = snapshot.step_count


# --------------------------------------------------------------------------
# model construction + staged training
# --------------------------------------------------------------------------

def build_model(kind: str, bundle: DatasetBundle, cfg: TrainConfig, *, sdp: SDP | None = None,
                sdm: SDM | None = None):
    from .baselines import CML, MFBPR, ItemKNN

    rng = RngStream(cfg.seed).child(_INIT_TAG.get(kind, 0))
    M, N = bundle.num_users, bundle.num_items
    if kind == "sdp":
        return SDP(M, N, cfg.dim, rng=rng)
    if kind == "sdm":
        return SDM(M, N, cfg.dim, hops=cfg.hops, rng=rng)
    if kind == "sdmr":
        return SDMR(sdp, sdm, mode=cfg.fusion_mode, beta=cfg.beta, rng=rng)
    if kind == "mfbpr":
        return MFBPR(M, N, cfg.dim, rng=rng)
    if kind == "cml":
        return CML(M, N, cfg.dim, rng=rng)
    if kind == "itemknn":
        return ItemKNN(bundle)
    raise ValueError(f"unknown model {kind!r}")


def training_rows(kind: str, train: Instances) -> Instances:
    """SDM and the fusion only see instances with at least one context item."""
    if kind in ("sdm", "sdmr"):
        return train.subset(np.flatnonzero(train.usable))
    return train


def dev_setup(bundle: DatasetBundle, instances: Instances, cfg: TrainConfig,
              dev_negatives: np.ndarray | None = None) -> tuple[Instances, np.ndarray]:
    dev = instances.split("dev")
    if dev_negatives is None:
        dev_negatives = evaluation_negatives(bundle, cfg.seed, "dev")
    return dev, dev_negatives


def train_model(kind: str, bundle: DatasetBundle, instances: Instances, cfg: TrainConfig, *,
                dev_negatives: np.ndarray | None = None, on_epoch=None, **upstream):
    """Build and fit one model; returns (model, FitResult or None for ItemKNN)."""
    model = build_model(kind, bundle, cfg, **upstream)
    if kind == "itemknn":
        return model, None
    dev, dev_negatives = dev_setup(bundle, instances, cfg, dev_negatives)
    train = training_rows(kind, instances.split("train"))
    rng = RngStream(cfg.seed).child(_TRAIN_TAG[kind])
    if kind == "sdmr" and cfg.fusion_mode == "learned":
        model.warm_start(_sdm_score_sample(model.sdm, train, bundle, rng))
    if kind == "sdmr" and cfg.fusion_mode == "weighted":
        return model, None
    result = fit(model, train, bundle, cfg, rng, dev, dev_negatives, on_epoch=on_epoch)
    return model, result


def _sdm_score_sample(sdm: SDM, train: Instances, bundle: DatasetBundle, rng: RngStream,
                      size: int = 20000) -> np.ndarray:
    pick = np.sort(rng.choice(len(train), size=min(size, len(train)), replace=False))
    sub = train.subset(pick)
    neg = NegativeSampler(bundle).sample(sub.users, 1, rng)[:, 0]
    pos_s = sdm.score(sub.users, sub.targets, sub.contexts, sub.masks)
    neg_s = sdm.score(sub.users, neg, sub.contexts, sub.masks)
    return np.concatenate([pos_s, neg_s])


@dataclasses.dataclass
class StageResult:
    name: str
    model: object
    fit: FitResult | None


def pretrain_and_fuse(bundle: DatasetBundle, instances: Instances, cfg: TrainConfig, *,
                      sdm_cfg: TrainConfig | None = None, sdp_cfg: TrainConfig | None = None,
                      fusion_cfg: TrainConfig | None = None, dev_negatives: np.ndarray | None = None,
                      on_epoch=None) -> list[StageResult]:
    """SDP, then SDM, then the fusion over both frozen models (in that order)."""
    dev_negatives = dev_setup(bundle, instances, cfg, dev_negatives)[1]
    stages = []

    def hook(name):
        if on_epoch is None:
            return None
        return lambda st: on_epoch(name, st)

    log.info("stage sdp")
    sdp, r1 = train_model("sdp", bundle, instances, sdp_cfg or cfg, dev_negatives=dev_negatives,
                          on_epoch=hook("sdp"))
    stages.append(StageResult("sdp", sdp, r1))
    log.info("stage sdm")
    sdm, r2 = train_model("sdm", bundle, instances, sdm_cfg or cfg, dev_negatives=dev_negatives,
                          on_epoch=hook("sdm"))
    stages.append(StageResult("sdm", sdm, r2))
    log.info("stage fusion")
    fused, r3 = train_model("sdmr", bundle, instances, fusion_cfg or cfg, dev_negatives=dev_negatives,
                            on_epoch=hook("sdmr"), sdp=sdp, sdm=sdm)
    stages.append(StageResult("sdmr", fused, r3))
    return stages
