"""Command-line entry point: ``lvae <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import config as config_mod
from . import datagen
from .benchmark import classify_split, split_rows, to_dataset
from .classifier import auroc
from .kernels import HEALTH_SCHEMA, CovariateMatrix
from .metrics import mse_report
from .nnet import ObservationSet
from .trainer import LVAE, impute, predict, pretrain, train
from .verify import verify_bounds


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _threads():
    n = int(os.environ.get("LVAE_THREADS", "0") or 0)
    if n > 0:
        torch.set_num_threads(n)


def _config(args):
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _echo(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    config_mod.save(cfg, os.path.join(directory, "config.resolved.txt"))


def _out_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    return d


class _JsonLog:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def __call__(self, rec):
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _load_train(data_dir):
    return to_dataset(datagen.load_split(os.path.join(data_dir, "train")))


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else format(float(v), ".9g") for v in row) + "\n")


# --- subcommands --------------------------------------------------------------


def cmd_generate(args):
    cfg = _config(args)
    datagen.save(datagen.generate(cfg.gen), args.out)
    _echo(cfg, args.out)
    print(json.dumps({"event": "generated", "out": args.out, "seed": cfg.gen.seed}))


def _fresh_model(cfg, data):
    return LVAE(data.X.schema, data.obs.d, cfg.model, data.X, seed=cfg.train.seed)


def cmd_pretrain(args):
    cfg = _config(args)
    data = _load_train(args.data_dir)
    model = _fresh_model(cfg, data)
    out_dir = _out_dir(args.out)
    log = _JsonLog(os.path.join(out_dir, "pretrain_log.jsonl"))
    try:
        pretrain(model, data, cfg.train, log=log)
    finally:
        log.close()
    model.save(args.out, meta={"stage": "pretrain", "seed": cfg.train.seed})
    _echo(cfg, out_dir)


def cmd_train(args):
    cfg = _config(args)
    data = _load_train(args.data_dir)
    val_dir = os.path.join(args.data_dir, "val")
    val = to_dataset(datagen.load_split(val_dir)) if os.path.exists(os.path.join(val_dir, "X.csv")) else None
    out_dir = _out_dir(args.out)
    log = _JsonLog(os.path.join(out_dir, cfg.run.log))
    try:
        if args.init:
            model, _ = LVAE.load(args.init)
        else:
            model = _fresh_model(cfg, data)
            pretrain(model, data, cfg.train, log=log)
        fit = train(model, data, val, cfg.train, log=log)
        log({"phase": "summary", "best_epoch": fit["best_epoch"], "best_val_loss": fit["best_val_loss"]})
    finally:
        log.close()
    model.save(args.out, meta={"stage": "train", "seed": cfg.train.seed, "best_epoch": fit["best_epoch"],
                               "best_val_loss": fit["best_val_loss"]})
    _echo(cfg, out_dir)
    print(json.dumps({"event": "trained", "checkpoint": args.out, "best_epoch": fit["best_epoch"],
                      "best_val_loss": fit["best_val_loss"]}))


def cmd_verify_bounds(args):
    start = args.seed if args.seed is not None else 0
    records, violations, seconds = verify_bounds(range(start, start + args.seeds))
    fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    finally:
        if args.out:
            fh.close()
    print(json.dumps({"instances": len(records), "violations": violations, "seconds": seconds}), file=sys.stderr)
    return 0 if violations == 0 else 2


def cmd_impute(args):
    model, _ = LVAE.load(args.model)
    split = datagen.load_split(args.data_dir if os.path.exists(os.path.join(args.data_dir, "Y.csv"))
                               else os.path.join(args.data_dir, "train"))
    Y = impute(model, ObservationSet.from_array(split.Y)).Y.numpy()
    _out_dir(args.out)
    datagen.write_matrix(args.out, Y)


def cmd_predict(args):
    model, _ = LVAE.load(args.model)
    data = _load_train(args.data_dir)
    Xq = CovariateMatrix(HEALTH_SCHEMA, datagen.read_matrix(args.query, len(datagen.COLUMNS), datagen.COLUMNS))
    seed = args.seed if args.seed is not None else 0
    mean, var = predict(model, data, Xq, args.mc_samples, seed)
    header = [f"{k}_{d}" for d in range(mean.shape[1]) for k in ("mean", "var")]
    rows = [np.column_stack([mean[i].numpy(), var[i].numpy()]).ravel() for i in range(mean.shape[0])]
    _out_dir(args.out)
    _write_csv(args.out, header, rows)


def cmd_classify(args):
    cfg = _config(args)
    model, _ = LVAE.load(args.model)
    data = _load_train(args.data_dir)
    test = datagen.load_split(os.path.join(args.data_dir, "test"))
    train_split = datagen.load_split(os.path.join(args.data_dir, "train"))
    _, fresh = split_rows(test, train_split)
    if not fresh.any():
        raise RuntimeError("test split holds no instances outside the training set")
    scored = classify_split(model, data, test, fresh, cfg.run.num_bins)
    _out_dir(args.out)
    _write_csv(args.out, ["id", "probability", "label"], [(str(c), p, str(y)) for c, p, y in scored])
    labels = [y for _, _, y in scored]
    summary = {"instances": len(scored)}
    if 0 < sum(labels) < len(labels):
        summary["auroc"] = auroc([p for _, p, _ in scored], labels)
    with open(args.out + ".summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))


def cmd_metrics(args):
    pred = datagen.read_matrix(args.pred, datagen.csv_width(args.pred))
    truth = datagen.read_matrix(args.truth, datagen.csv_width(args.truth))
    positions = None
    if args.mask_from:
        positions = np.isnan(datagen.read_matrix(args.mask_from, datagen.csv_width(args.mask_from)))
    ids = None
    if args.covariates:
        ids = datagen.read_matrix(args.covariates, len(datagen.COLUMNS), datagen.COLUMNS)[:, 0]
    print(json.dumps(mse_report(pred, truth, positions, ids), sort_keys=True))


# --- dispatch -------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="lvae", description="Longitudinal VAE toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=None)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("generate", cmd_generate, "write a synthetic benchmark")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    for name, fn, text in (("pretrain", cmd_pretrain, "pretrain encoder/decoder with a N(0, I) prior"),
                           ("train", cmd_train, "train the L-VAE")):
        sp = add(name, fn, text)
        sp.add_argument("--config")
        sp.add_argument("--data-dir", required=True)
        sp.add_argument("--out", required=True)
        if name == "train":
            sp.add_argument("--init", help="start from a pretrained checkpoint")

    sp = add("verify-bounds", cmd_verify_bounds, "check KL bound ordering on random instances")
    sp.add_argument("--seeds", type=int, default=100)
    sp.add_argument("--out")

    sp = add("impute", cmd_impute, "fill missing observations")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out", required=True)

    sp = add("predict", cmd_predict, "predict observations at query covariates")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mc-samples", type=int, default=25)

    sp = add("classify", cmd_classify, "score fresh test instances for the outcome covariate")
    sp.add_argument("--config")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out", required=True)

    sp = add("metrics", cmd_metrics, "MSE of predictions against truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--mask-from", help="score only entries missing in this file")
    sp.add_argument("--covariates", help="X.csv giving instance ids for per-instance summaries")
    return p


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing subcommand")
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(str(exc), file=sys.stderr)
        return 1
    _threads()
    try:
        code = args.fn(args)
    except Exception as exc:  # surfaced as a runtime failure
        print(f"lvae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
