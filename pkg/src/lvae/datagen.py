"""Synthetic longitudinal benchmark with a known additive-GP latent structure.

Each instance has integer ages ``0 .. n_p-1``, a sex, a disease flag with an
onset age, and an irrelevant binary location. Latent trajectories are sums of
GP draws (instance offset, shared age trend, instance-specific age deviation,
sex-specific age trend, disease trajectory over time-since-onset); observations
are a fixed random two-layer network of the latents plus Gaussian noise,
standardised per column and then masked completely at random.

Splits written to disk:

* ``train/`` -- all training instances; "prediction" instances keep only their
  first ``observed_points`` rows;
* ``val/``   -- fresh instances for early stopping;
* ``test/``  -- the held-out later rows of the prediction instances (``Y.csv``
  fully blank) followed by fresh fully generated instances (masked as usual).

``Y_truth.csv`` always holds the unmasked values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .kernels import HEALTH_SCHEMA, CovariateMatrix
from .nnet import ObservationSet

COLUMNS = HEALTH_SCHEMA.names
FLOAT_FORMAT = ".9g"


@dataclass
class GenConfig:
    instances: int = 60
    points: int = 20
    obs_dim: int = 32
    latent_dim: int = 4
    noise: float = 0.1
    missing: float = 0.25
    prediction_fraction: float = 10 / 60
    observed_points: int = 10
    val_instances: int = 10
    test_instances: int = 40
    disease_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        for name in ("instances", "points", "obs_dim", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        for name in ("missing", "prediction_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.val_instances < 0 or self.test_instances < 0 or self.noise < 0:
            raise ValueError("val_instances, test_instances and noise must be non-negative")
        if self.prediction_fraction > 0 and self.num_prediction > 0:
            if not 1 <= self.observed_points < self.points:
                raise ValueError("future prediction needs 1 <= observed_points < points")

    @property
    def num_prediction(self):
        return int(round(self.prediction_fraction * self.instances))


@dataclass
class Split:
    X: np.ndarray  # (N, 6), NaN = missing
    Y: np.ndarray  # (N, D), NaN = missing
    Y_truth: np.ndarray  # (N, D)

    def covariates(self):
        return CovariateMatrix(HEALTH_SCHEMA, self.X)

    def observations(self):
        return ObservationSet.from_array(self.Y)


def _round9(a):
    return np.vectorize(lambda v: float(format(v, FLOAT_FORMAT)) if np.isfinite(v) else v, otypes=[float])(a)


def _gp_draw(rng, x, scale, lengthscale, size=None):
    """Joint draw(s) of a zero-mean SE-GP on the points ``x``."""
    d = x[:, None] - x[None, :]
    K = scale**2 * np.exp(-0.5 * d**2 / lengthscale**2) + 1e-9 * np.eye(len(x))
    L = np.linalg.cholesky(K)
    shape = (len(x),) if size is None else (size, len(x))
    return rng.standard_normal(shape) @ L.T


class _Truth:
    """Fixed shared components of the ground-truth latent process and decoder."""

    def __init__(self, cfg: GenConfig, rng):
        T = cfg.points
        Lt = cfg.latent_dim
        self.cfg = cfg
        self.scales = {
            "id": rng.uniform(0.3, 0.7, Lt),
            "age": rng.uniform(0.5, 1.0, Lt),
            "id_age": rng.uniform(0.3, 0.6, Lt),
            "sex_age": rng.uniform(0.5, 1.0, Lt),
            "disease": cfg.disease_scale * rng.uniform(0.7, 1.0, Lt),
        }
        ages = np.arange(T, dtype=float)
        self.age_grid = ages
        self.dage_grid = np.arange(-T, T, dtype=float)
        self.age_fn = np.stack([_gp_draw(rng, ages, s, T / 3.0) for s in self.scales["age"]])
        self.sex_fn = np.stack([_gp_draw(rng, ages, s, T / 4.0, size=2) for s in self.scales["sex_age"]])
        self.dis_fn = np.stack([_gp_draw(rng, self.dage_grid, s, T / 5.0) for s in self.scales["disease"]])
        # damp the disease curve before onset
        before = self.dage_grid < 0
        self.dis_fn[:, before] *= 0.2
        H = 2 * cfg.obs_dim
        self.W1 = rng.standard_normal((H, Lt)) / np.sqrt(Lt)
        self.b1 = rng.standard_normal(H) * 0.3
        self.W2 = rng.standard_normal((cfg.obs_dim, H)) / np.sqrt(H)
        self.b2 = rng.standard_normal(cfg.obs_dim) * 0.3

    def instance(self, rng, code):
        cfg = self.cfg
        T = cfg.points
        sex = int(rng.integers(0, 2))
        diseased = int(rng.integers(0, 2))
        loc = int(rng.integers(0, 2))
        onset = int(rng.integers(T // 4, (3 * T) // 4 + 1))
        ages = self.age_grid
        z = np.zeros((T, cfg.latent_dim))
        for l in range(cfg.latent_dim):
            z[:, l] = (rng.standard_normal() * self.scales["id"][l]
                       + self.age_fn[l]
                       + _gp_draw(rng, ages, self.scales["id_age"][l], T / 3.0)
                       + self.sex_fn[l, sex])
            if diseased:
                idx = (ages - onset + T).astype(int)
                z[:, l] += self.dis_fn[l, idx]
        dage = ages - onset if diseased else np.full(T, np.nan)
        X = np.column_stack([np.full(T, code), ages, np.full(T, sex), np.full(T, diseased), dage, np.full(T, loc)])
        return X.astype(float), z

    def observe(self, rng, z):
        h = np.tanh(z @ self.W1.T + self.b1)
        y = h @ self.W2.T + self.b2
        return y + self.cfg.noise * rng.standard_normal(y.shape)


def generate(cfg: GenConfig) -> dict[str, Split]:
    """Generate the three splits in memory (values already rounded to the on-disk precision)."""
    rng = np.random.default_rng(cfg.seed)
    truth = _Truth(cfg, rng)
    total = cfg.instances + cfg.val_instances + cfg.test_instances
    Xs, Ys = [], []
    for code in range(total):
        X, z = truth.instance(rng, code)
        Xs.append(X)
        Ys.append(truth.observe(rng, z))
    Y_all = np.concatenate(Ys[: cfg.instances])
    mean, std = Y_all.mean(0), Y_all.std(0)
    std[std == 0] = 1.0
    Ys = [_round9((y - mean) / std) for y in Ys]
    Xs = [_round9(x) for x in Xs]
    masks = [rng.random(y.shape) < cfg.missing for y in Ys]

    pred = set(rng.choice(cfg.instances, size=cfg.num_prediction, replace=False).tolist()) if cfg.num_prediction else set()
    k = cfg.observed_points

    def masked(y, m):
        out = y.copy()
        out[m] = np.nan
        return out

    train, future = [], []
    for p in range(cfg.instances):
        rows = slice(0, k) if p in pred else slice(None)
        train.append((Xs[p][rows], masked(Ys[p], masks[p])[rows], Ys[p][rows]))
        if p in pred:
            future.append((Xs[p][k:], np.full_like(Ys[p][k:], np.nan), Ys[p][k:]))
    val = [(Xs[p], masked(Ys[p], masks[p]), Ys[p]) for p in range(cfg.instances, cfg.instances + cfg.val_instances)]
    fresh = [(Xs[p], masked(Ys[p], masks[p]), Ys[p]) for p in range(cfg.instances + cfg.val_instances, total)]

    def cat(parts):
        if not parts:
            return Split(np.zeros((0, len(COLUMNS))), np.zeros((0, cfg.obs_dim)), np.zeros((0, cfg.obs_dim)))
        return Split(*(np.concatenate([p[i] for p in parts]) for i in range(3)))

    return {"train": cat(train), "val": cat(val), "test": cat(future + fresh)}


# --- files ------------------------------------------------------------------------


def _fmt(v):
    return "" if not np.isfinite(v) else format(float(v), FLOAT_FORMAT)


def write_matrix(path, A, header=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in A:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_matrix(path, width, header=None):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if header is not None:
        if not lines or lines[0].split(",") != list(header):
            raise ValueError(f"{path}: expected header {','.join(header)}")
        lines = lines[1:]
    out = np.empty((len(lines), width))
    for i, line in enumerate(lines):
        cells = line.split(",")
        if len(cells) != width:
            raise ValueError(f"{path}: row {i + 1} has {len(cells)} fields, expected {width}")
        for j, c in enumerate(cells):
            try:
                out[i, j] = float(c) if c.strip() else np.nan
            except ValueError:
                raise ValueError(f"{path}: row {i + 1}, column {j + 1}: cannot parse {c!r}") from None
    return out


def csv_width(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    return len(first.split(",")) if first else 0


def save_split(split: Split, directory):
    os.makedirs(directory, exist_ok=True)
    write_matrix(os.path.join(directory, "X.csv"), split.X, COLUMNS)
    write_matrix(os.path.join(directory, "Y.csv"), split.Y)
    write_matrix(os.path.join(directory, "Y_truth.csv"), split.Y_truth)


def save(splits: dict[str, Split], out_dir):
    for name, split in splits.items():
        save_split(split, os.path.join(out_dir, name))


def load_split(directory) -> Split:
    X = read_matrix(os.path.join(directory, "X.csv"), len(COLUMNS), COLUMNS)
    y_path = os.path.join(directory, "Y.csv")
    D = csv_width(y_path)
    Y = read_matrix(y_path, D) if D else np.zeros((0, 0))
    t_path = os.path.join(directory, "Y_truth.csv")
    Yt = read_matrix(t_path, D) if os.path.exists(t_path) and D else np.full_like(Y, np.nan)
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"{directory}: Y.csv has {Y.shape[0]} rows but X.csv has {X.shape[0]}")
    if Yt.shape != Y.shape:
        raise ValueError(f"{directory}: Y_truth.csv shape {Yt.shape} differs from Y.csv {Y.shape}")
    return Split(X, Y, Yt)


def load(directory):
    """Parsed ``(ObservationSet, CovariateMatrix)`` of one split directory."""
    split = load_split(directory)
    return split.observations(), split.covariates()
