"""sdmrec command line: prep, train, eval, analyze and sweep.

Typical session::

    sdmrec prep --data u.data --out runs/ml100k
    sdmrec train --data runs/ml100k --model sdmr --hops 3 --out runs/sdmr
    sdmrec eval --data runs/ml100k --out runs/sdmr
    sdmrec train --data runs/ml100k --model sdm --hops 4 --out runs/sdm4
    sdmrec analyze --data runs/ml100k --out runs/sdm4
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .baselines import CML, MFBPR, ItemKNN
from .config import GRID, MODELS, TrainConfig, canonical_text, config_hash, read_config
from .data import (DataError, Instances, basket_bundle, build_basket_instances, build_context_instances,
                   filter_transactions, kcore_filter, load_interactions, load_transactions, read_bundle,
                   split_leave_one_out, write_bundle)
from .evaluation import evaluate_all, evaluation_negatives, load_negatives, save_negatives
from .numkit import NumericError, ParameterStore, RngStream, load_checkpoint, save_checkpoint
from .sdm import SDM
from .sdmr import SDMR
from .sdp import SDP
from .train import RUN_LOG_HEADER, pretrain_and_fuse, train_model

log = logging.getLogger("sdmrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# flag name -> TrainConfig field
FLAG_FIELDS = {
    "dim": "dim", "hops": "hops", "context_len": "context_len", "neg": "negatives_per_positive",
    "batch": "batch_size", "lr": "learning_rate", "reg": "lambda_reg", "epochs": "epochs",
    "patience": "patience", "seed": "seed", "k": "eval_k", "fusion_mode": "fusion_mode", "beta": "beta",
}
GRID_FLAGS = {"dim": "dim", "context_len": "context_len", "hops": "hops", "reg": "lambda_reg"}


class UsageError(Exception):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        return str(raw).lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return str(raw)


def resolve_config(args, overrides: dict | None = None) -> tuple[TrainConfig, dict]:
    """defaults < --config file < flags < overrides. Returns the TrainConfig and the extra keys."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    extra: dict = {}
    if getattr(args, "config", None):
        for key, raw in read_config(args.config).items():
            if key in fields:
                values[key] = _coerce(fields[key], raw)
            else:
                extra[key] = raw
    for flag, field in FLAG_FIELDS.items():
        raw = getattr(args, flag, None)
        if raw is not None:
            values[field] = _coerce(fields[field], raw)
    if getattr(args, "reg_embeddings_only", False):
        values["reg_embeddings_only"] = True
    values.update(overrides or {})
    try:
        cfg = TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    off = cfg.off_grid()
    if off and not getattr(args, "allow_offgrid", False):
        raise UsageError(f"off-grid values {', '.join(off)} (pass --allow-offgrid to use them)")
    return cfg, extra


def run_values(cfg: TrainConfig, model: str, task: str, data_digest: str) -> dict:
    return {**dataclasses.asdict(cfg), "model": model, "task": task, "data": data_digest}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def stamp(seed: int, chash: str) -> str:
    return f"# seed={seed} config_hash={chash}\n"


def write_manifest(out: Path, seed: int, chash: str) -> Path:
    """manifest.tsv: every file in `out` with the (seed, config hash) it was produced under."""
    rows = [f"{p.name}\t{seed}\t{chash}\t{file_digest(p)}\n"
            for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.tsv"]
    path = out / "manifest.tsv"
    path.write_text("file\tseed\tconfig_hash\tsha256_16\n" + "".join(rows), encoding="utf-8")
    return path


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path} ({hint})")
    return path


# --------------------------------------------------------------------------
# data plumbing
# --------------------------------------------------------------------------

def load_prepared(bundle_dir: Path, cfg: TrainConfig):
    """Bundle, instances for cfg.context_len (or the stored basket instances) and data digest."""
    _require(bundle_dir / "bundle.tsv", "run `sdmrec prep` first")
    bundle = read_bundle(bundle_dir)
    if bundle.task == "basket":
        inst = Instances.read_tsv(_require(bundle_dir / "instances.tsv", "run `sdmrec prep` first"),
                                  bundle.pad)
    else:
        inst = build_context_instances(bundle, cfg.context_len)
    return bundle, inst, file_digest(bundle_dir / "bundle.tsv")


def cached_negatives(bundle_dir: Path, bundle, seed: int, split: str) -> np.ndarray:
    path = bundle_dir / f"negatives_{split}_seed{seed}.tsv"
    if path.exists():
        negs = load_negatives(path)
        if negs.shape[0] == bundle.num_users:
            return negs
    negs = evaluation_negatives(bundle, seed, split)
    save_negatives(path, negs)
    return negs


def build_from_store(kind: str, bundle, cfg: TrainConfig, store: ParameterStore):
    M, N = bundle.num_users, bundle.num_items

    def part(prefix):
        sub = ParameterStore()
        for name, p in store.items():
            if name.startswith(prefix):
                sub.add(name, p.value)
        sub.step_count = store.step_count
        return sub

    if kind == "sdp":
        return SDP(M, N, cfg.dim, store=part("sdp."))
    if kind == "sdm":
        return SDM(M, N, cfg.dim, hops=cfg.hops, store=part("sdm."))
    if kind == "sdmr":
        sdp = SDP(M, N, cfg.dim, store=part("sdp."))
        sdm = SDM(M, N, cfg.dim, hops=cfg.hops, store=part("sdm."))
        return SDMR(sdp, sdm, mode=cfg.fusion_mode, beta=cfg.beta, store=part("sdmr."))
    if kind == "mfbpr":
        return MFBPR(M, N, cfg.dim, store=part("mf."))
    if kind == "cml":
        return CML(M, N, cfg.dim, store=part("cml."))
    if kind == "itemknn":
        return ItemKNN(bundle)
    raise UsageError(f"unknown model {kind!r}")


def merged_store(model) -> ParameterStore:
    """All parameters a model reads, including frozen upstream ones."""
    out = ParameterStore()
    parts = [model]
    if isinstance(model, SDMR):
        parts = [model.sdp, model.sdm, model]
    for m in parts:
        for name, p in getattr(m, "store", ParameterStore()).items():
            out.add(name, p.value)
        out.step_count += getattr(m, "store", ParameterStore()).step_count
    return out


def fit_model(kind: str, bundle, inst, cfg: TrainConfig, dev_negs, run_log=None):
    def on_epoch(stage, st):
        if run_log is not None:
            run_log.write(f"{stage}\t{st.tsv_row()}\n")
            run_log.flush()
        log.info("%s epoch %d loss %.5f dev hit %.4f ndcg %.4f", stage, st.epoch, st.mean_loss,
                 st.dev_hit, st.dev_ndcg)

    if kind == "sdmr":
        stages = pretrain_and_fuse(bundle, inst, cfg, dev_negatives=dev_negs, on_epoch=on_epoch)
        return stages[-1].model, stages[-1].fit
    return train_model(kind, bundle, inst, cfg, dev_negatives=dev_negs,
                       on_epoch=lambda st: on_epoch(kind, st))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_prep(args) -> int:
    out = Path(args.out)
    seed = int(args.seed if args.seed is not None else 42)
    s = int(args.context_len if args.context_len is not None else 5)
    data = Path(args.data)
    if not data.exists():
        raise MissingArtifact(f"missing input file {data}")
    if args.task == "basket":
        txs = filter_transactions(load_transactions(data))
        inst = build_basket_instances(txs)
        bundle = basket_bundle(txs, inst)
        n_inter = len(inst)
    else:
        log_ = load_interactions(data, args.format)
        if args.kcore > 0:
            log_ = kcore_filter(log_, args.kcore)
        n_inter = len(log_)
        bundle = split_leave_one_out(log_, RngStream(seed))
        inst = build_context_instances(bundle, s)
    write_bundle(out, bundle)
    inst.write_tsv(out / "instances.tsv")
    for split in ("dev", "test"):
        cached_negatives(out, bundle, seed, split)
    values = {"task": args.task, "format": args.format, "kcore": args.kcore, "seed": seed,
              "context_len": s, "source": file_digest(data)}
    chash = config_hash(values)
    (out / "prep_config.txt").write_text(stamp(seed, chash) + canonical_text(values), encoding="utf-8")
    stats = (stamp(seed, chash) + "users\titems\tinteractions\tinstances\n"
             f"{bundle.num_users}\t{bundle.num_items}\t{n_inter}\t{len(inst)}\n")
    (out / "stats.tsv").write_text(stats, encoding="utf-8")
    write_manifest(out, seed, chash)
    print(f"users={bundle.num_users} items={bundle.num_items} interactions={n_inter} instances={len(inst)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _ = resolve_config(args)
    bundle_dir, out = Path(args.data), Path(args.out)
    bundle, inst, digest = load_prepared(bundle_dir, cfg)
    values = run_values(cfg, args.model, bundle.task, digest)
    chash = config_hash(values)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(stamp(cfg.seed, chash) + canonical_text(values), encoding="utf-8")
    dev_negs = cached_negatives(bundle_dir, bundle, cfg.seed, "dev")
    with open(out / "run_log.tsv", "w", encoding="utf-8") as run_log:
        run_log.write(stamp(cfg.seed, chash) + "stage\t" + RUN_LOG_HEADER + "\n")
        model, result = fit_model(args.model, bundle, inst, cfg, dev_negs, run_log)
    save_checkpoint(out / "model.ckpt", merged_store(model), cfg.seed, chash)
    dev = evaluate_all(model, bundle, inst, cfg.eval_k, cfg.seed, negatives=dev_negs, split="dev",
                       model_id=args.model, config_hash=chash)
    dev.write_tsv(out / "metrics_dev.tsv")
    write_manifest(out, cfg.seed, chash)
    print(dev.summary_line())
    return EXIT_OK


def load_run(run_dir: Path, bundle_dir: Path):
    ckpt = run_dir / "model.ckpt"
    if not ckpt.exists():
        raise MissingArtifact(f"missing checkpoint {ckpt} (run `sdmrec train --out {run_dir}` first)")
    cfg_path = _require(run_dir / "config.txt", "run `sdmrec train` first")
    raw = read_config(cfg_path)
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    cfg = TrainConfig(**{k: _coerce(fields[k], v) for k, v in raw.items() if k in fields})
    bundle, inst, digest = load_prepared(bundle_dir, cfg)
    if raw.get("data") and raw["data"] != digest:
        raise DataError(f"{bundle_dir} is not the data {run_dir} was trained on")
    store, meta = load_checkpoint(ckpt)
    model = build_from_store(raw["model"], bundle, cfg, store)
    return model, cfg, raw, bundle, inst, meta


def cmd_eval(args) -> int:
    bundle_dir, run_dir = Path(args.data), Path(args.run or args.out)
    model, cfg, raw, bundle, inst, meta = load_run(run_dir, bundle_dir)
    k = int(args.k) if args.k is not None else cfg.eval_k
    negs = cached_negatives(bundle_dir, bundle, cfg.seed, args.split)
    rep = evaluate_all(model, bundle, inst, k, cfg.seed, negatives=negs, split=args.split,
                       model_id=raw["model"], config_hash=meta.config_hash)
    rep.write_tsv(run_dir / f"metrics_{args.split}.tsv")
    (run_dir / f"metrics_{args.split}.json").write_text(rep.summary_line() + "\n", encoding="utf-8")
    write_manifest(run_dir, cfg.seed, meta.config_hash)
    print(rep.summary_line())
    return EXIT_OK


def cmd_analyze(args) -> int:
    bundle_dir, run_dir = Path(args.data), Path(args.run or args.out)
    model, cfg, raw, bundle, inst, meta = load_run(run_dir, bundle_dir)
    sdm = model.sdm if isinstance(model, SDMR) else model
    if not isinstance(sdm, SDM):
        raise UsageError(f"analyze needs an sdm or sdmr run, {run_dir} holds {raw['model']}")
    out = Path(args.analysis_out) if args.analysis_out else run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    pmi = analysis.compute_pmi(inst, bundle.num_items)
    train = inst.split("train")
    train = train.subset(np.flatnonzero(train.usable))
    att = analysis.attention_weights(sdm, train)
    results = []
    for h in range(1, sdm.hops + 1):
        res = analysis.attention_pmi_correlation(sdm, train, pmi, h, attention=att,
                                                 scatter_path=out / f"scatter_hop{h}.csv")
        results.append(res)
        print(f"hop {h}: pearson r = {res.pearson_r:.4f} over {res.n_pairs} pairs")
    analysis.write_correlation_summary(out / "pmi_correlation.tsv", results)
    n = analysis.export_attention(sdm, inst.split(args.split), out / f"attention_{args.split}.csv")
    write_manifest(out, cfg.seed, meta.config_hash)
    print(f"exported {n} attention rows")
    return EXIT_OK


def _grid_values(args, flag: str, default):
    raw = getattr(args, flag, None)
    if raw is None:
        return [default]
    return [x for x in str(raw).split(",") if x]


def cmd_sweep(args) -> int:
    bundle_dir, out = Path(args.data), Path(args.out)
    base, _ = resolve_config(_without_grid(args))
    axes = {flag: _grid_values(args, flag, getattr(base, field)) for flag, field in GRID_FLAGS.items()}
    trials = list(itertools.product(*axes.values()))
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n, combo in enumerate(trials):
        over = {GRID_FLAGS[f]: v for f, v in zip(axes, combo)}
        cfg, _ = resolve_config(_without_grid(args), {k: type(getattr(base, k))(v) for k, v in over.items()})
        bundle, inst, digest = load_prepared(bundle_dir, cfg)
        chash = config_hash(run_values(cfg, args.model, bundle.task, digest))
        dev_negs = cached_negatives(bundle_dir, bundle, cfg.seed, "dev")
        test_negs = cached_negatives(bundle_dir, bundle, cfg.seed, "test")
        log.info("trial %d/%d %s", n + 1, len(trials), over)
        model, result = fit_model(args.model, bundle, inst, cfg, dev_negs)
        dev = evaluate_all(model, bundle, inst, cfg.eval_k, cfg.seed, negatives=dev_negs, split="dev")
        test = evaluate_all(model, bundle, inst, cfg.eval_k, cfg.seed, negatives=test_negs)
        trial_dir = out / f"trial{n:03d}"
        save_checkpoint(trial_dir / "model.ckpt", merged_store(model), cfg.seed, chash)
        rows.append((cfg, chash, dev, test, result.best_epoch if result else 0))
    rows.sort(key=lambda r: (-r[2].hit_at_k, -r[2].ndcg_at_k))
    with open(out / "leaderboard.tsv", "w", encoding="utf-8") as fh:
        fh.write(stamp(base.seed, config_hash(run_values(base, args.model, "sweep", ""))))
        fh.write("model\tdim\tcontext_len\thops\tlambda_reg\tbest_epoch\tdev_hit\tdev_ndcg"
                 "\ttest_hit\ttest_ndcg\tconfig_hash\n")
        for cfg, chash, dev, test, ep in rows:
            fh.write(f"{args.model}\t{cfg.dim}\t{cfg.context_len}\t{cfg.hops}\t{cfg.lambda_reg!r}\t{ep}"
                     f"\t{dev.hit_at_k:.6f}\t{dev.ndcg_at_k:.6f}\t{test.hit_at_k:.6f}\t{test.ndcg_at_k:.6f}"
                     f"\t{chash}\n")
    print(f"{len(rows)} trials written to {out / 'leaderboard.tsv'}")
    return EXIT_OK


def _without_grid(args):
    ns = argparse.Namespace(**vars(args))
    for flag in GRID_FLAGS:
        setattr(ns, flag, None)
    return ns


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data", required=True, help="raw data file for prep, prepared directory otherwise")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--context-len", dest="context_len")
    common.add_argument("-v", "--verbose", action="store_true")

    hyper = _Parser(add_help=False)
    hyper.add_argument("--model", choices=MODELS, default="sdmr")
    for flag in ("dim", "hops", "neg", "batch", "lr", "reg", "epochs", "patience", "k", "beta"):
        hyper.add_argument(f"--{flag}")
    hyper.add_argument("--fusion-mode", dest="fusion_mode", choices=("learned", "weighted"))
    hyper.add_argument("--reg-embeddings-only", action="store_true")
    hyper.add_argument("--allow-offgrid", action="store_true",
                       help="accept values outside " + ", ".join(f"{k}{list(v)}" for k, v in GRID.items()))

    p = _Parser(prog="sdmrec", description="Signed-distance recommenders: training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    prep = sub.add_parser("prep", parents=[common], help="ingest, filter, split and build instances")
    prep.add_argument("--format", choices=("movielens_tsv", "generic_csv"), default="movielens_tsv")
    prep.add_argument("--task", choices=("general", "basket"), default="general")
    prep.add_argument("--kcore", type=int, default=0, help="k-core threshold, 0 keeps every interaction")
    prep.set_defaults(func=cmd_prep)

    train = sub.add_parser("train", parents=[common, hyper], help="train one model (sdmr: all stages)")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a trained run")
    ev.add_argument("--run", help="run directory (defaults to --out)")
    ev.add_argument("--k")
    ev.add_argument("--split", choices=("test", "dev"), default="test")
    ev.set_defaults(func=cmd_eval)

    an = sub.add_parser("analyze", parents=[common], help="PMI correlation and attention export")
    an.add_argument("--run", help="run directory (defaults to --out)")
    an.add_argument("--analysis-out", help="defaults to <run>/analysis")
    an.add_argument("--split", choices=("train", "dev", "test"), default="test",
                    help="instances whose attention is exported")
    an.set_defaults(func=cmd_analyze)

    sw = sub.add_parser("sweep", parents=[common, hyper],
                        help="grid over --dim/--context-len/--hops/--reg (comma lists)")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sdmrec: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"sdmrec: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"sdmrec: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
