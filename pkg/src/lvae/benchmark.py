"""End-to-end synthetic benchmark: L-VAE against simple baselines.

Run as ``python -m lvae.benchmark [config]``; prints one JSON report.
"""

from __future__ import annotations

import copy
import json
import sys
import time

import numpy as np
import torch

from . import config as config_mod
from .classifier import BayesClassifier, auroc, auroc_permutation_pvalue
from .datagen import Split, generate
from .kernels import HEALTH_SCHEMA, CovariateMatrix
from .metrics import column_mean_impute, last_observation, mse_report
from .nnet import ObservationSet
from .trainer import LVAE, Dataset, impute, predict, pretrain, train


def to_dataset(split: Split) -> Dataset:
    return Dataset(split.observations(), split.covariates())


def split_rows(test: Split, train: Split):
    """Boolean masks over test rows: future rows of training instances, rows of fresh instances."""
    known = np.isin(test.X[:, 0], np.unique(train.X[:, 0]))
    return known, ~known


def decode_last_latent(model: LVAE, data: Dataset, query_ids):
    """Baseline forecast: decode the encoder mean of each instance's last observed row."""
    last = {code: b - 1 for code, a, b in data.X.instance_blocks}
    rows = [last[int(c)] for c in query_ids]
    with torch.no_grad():
        mu, _ = model.encode(data)
        mean, _ = model.decoder(mu[rows])
    return mean.numpy()


def classify_split(model: LVAE, train_data: Dataset, test: Split, rows, num_bins=6):
    clf = BayesClassifier(model, train_data, num_bins=num_bins)
    X, Y = test.X[rows], test.Y[rows]
    out = []
    for code in dict.fromkeys(X[:, 0].tolist()):
        r = X[:, 0] == code
        p, _, _ = clf.score(ObservationSet.from_array(Y[r]), CovariateMatrix(HEALTH_SCHEMA, X[r]))
        out.append((int(code), p, int(X[r][0, 3])))
    return out


def run_benchmark(cfg: config_mod.RunConfig, log=None, classify=True) -> dict:
    t0 = time.perf_counter()
    splits = generate(cfg.gen)
    tr_split, te_split = splits["train"], splits["test"]
    tr, va = to_dataset(tr_split), to_dataset(splits["val"])
    model = LVAE(tr.X.schema, tr.obs.d, cfg.model, tr.X, seed=cfg.train.seed)
    pretrain(model, tr, cfg.train, log=log)
    vae = copy.deepcopy(model)
    fit = train(model, tr, va, cfg.train, log=log)
    t_train = time.perf_counter() - t0

    report = {"train_seconds": t_train, "best_epoch": fit["best_epoch"], "best_val_loss": fit["best_val_loss"]}

    # imputation of the masked training entries
    missing = np.isnan(tr_split.Y)
    ids = tr_split.X[:, 0]
    truth = tr_split.Y_truth
    report["impute"] = {
        "lvae": mse_report(impute(model, tr.obs).Y.numpy(), truth, missing, ids),
        "vae": mse_report(impute(vae, tr.obs).Y.numpy(), truth, missing, ids),
        "column_mean": mse_report(column_mean_impute(tr_split.Y), truth, missing, ids),
    }

    # future rows of the prediction instances
    future, fresh = split_rows(te_split, tr_split)
    if future.any():
        Xq = CovariateMatrix(HEALTH_SCHEMA, te_split.X[future])
        Yt = te_split.Y_truth[future]
        q_ids = te_split.X[future, 0]
        mean, _ = predict(model, tr, Xq, cfg.run.mc_samples, cfg.train.seed)
        locf = last_observation(tr_split.Y, ids, fallback=np.nanmean(tr_split.Y, axis=0))
        report["predict"] = {
            "lvae": mse_report(mean.numpy(), Yt, None, q_ids),
            "vae": mse_report(decode_last_latent(vae, tr, q_ids), Yt, None, q_ids),
            "locf": mse_report(np.stack([locf[c] for c in q_ids.tolist()]), Yt, None, q_ids),
        }

    if classify and fresh.any():
        scored = classify_split(model, tr, te_split, fresh, cfg.run.num_bins)
        probs = [p for _, p, _ in scored]
        labels = [y for _, _, y in scored]
        if 0 < sum(labels) < len(labels):
            report["classify"] = {
                "instances": len(scored),
                "auroc": auroc(probs, labels),
                "p_value": auroc_permutation_pvalue(probs, labels, 2000, cfg.train.seed),
            }
    report["total_seconds"] = time.perf_counter() - t0
    return report


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    cfg = config_mod.load(argv[0]) if argv else config_mod.RunConfig()
    print(json.dumps(run_benchmark(cfg), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
