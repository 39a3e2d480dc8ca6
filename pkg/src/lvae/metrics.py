"""Scoring helpers for imputation and future prediction."""

from __future__ import annotations

import numpy as np


def mse_report(pred, truth, positions=None, ids=None) -> dict:
    """MSE over ``positions`` (default: all finite truth entries).

    With ``ids`` (one per row) the per-instance MSEs are also summarised as a
    mean and standard error across instances.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: predictions {pred.shape} vs truth {truth.shape}")
    pos = np.isfinite(truth) if positions is None else np.asarray(positions, dtype=bool)
    if pos.shape != truth.shape:
        raise ValueError(f"shape mismatch: positions {pos.shape} vs truth {truth.shape}")
    if not pos.any():
        raise ValueError("no positions to score")
    err = (pred - truth) ** 2
    report = {"mse": float(err[pos].mean()), "entries": int(pos.sum())}
    if ids is not None:
        ids = np.asarray(ids)
        if ids.shape[0] != truth.shape[0]:
            raise ValueError("ids must have one entry per row")
        per = []
        for code in dict.fromkeys(ids.tolist()):
            r = ids == code
            if pos[r].any():
                per.append(err[r][pos[r]].mean())
        per = np.array(per)
        report["instances"] = len(per)
        report["instance_mean"] = float(per.mean())
        report["instance_se"] = float(per.std(ddof=1) / np.sqrt(len(per))) if len(per) > 1 else 0.0
    return report


def column_mean_impute(Y):
    """Replace NaNs by the column mean of the observed entries (0 for empty columns)."""
    Y = np.asarray(Y, dtype=float)
    seen = np.isfinite(Y)
    counts = seen.sum(0)
    means = np.where(seen, Y, 0.0).sum(0) / np.maximum(counts, 1)
    return np.where(np.isnan(Y), means, Y)


def last_observation(Y, ids, fallback=None):
    """Per instance and column, the last observed value (``fallback`` column value if none)."""
    Y = np.asarray(Y, dtype=float)
    ids = np.asarray(ids)
    fallback = np.zeros(Y.shape[1]) if fallback is None else np.asarray(fallback, dtype=float)
    out = {}
    for code in dict.fromkeys(ids.tolist()):
        block = Y[ids == code]
        last = fallback.copy()
        for j in range(Y.shape[1]):
            seen = np.flatnonzero(np.isfinite(block[:, j]))
            if seen.size:
                last[j] = block[seen[-1], j]
        out[code] = last
    return out
