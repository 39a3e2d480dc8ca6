"""Generative Bayes classifier for a binary outcome covariate.

A test instance is scored under each hypothesis by the ELBO of the joint
(train + test) data with the training encodings held fixed. Only the part of
that ELBO that depends on the test instance's covariates is computed: its
reconstruction term and the expected KL from its encoder posterior to the GP
conditional given the training latents,

    E_{z_tr ~ q}[ KL(q(z*) || p(z* | z_tr)) ]
        = KL(q(z*) || N(A^T mu, C)) + 1/2 tr(C^-1 A^T W A),

with ``A = Sigma^-1 K_{X X*}`` and ``C = Sigma_** - K_{*X} A``. Terms that do
not depend on the hypothesis cancel in the posterior probability.

Under the positive hypothesis the event time is unknown; the ELBO is averaged
over event-time bins fitted on the training instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit
from scipy.stats import rankdata

from .kernels import NOISE_VARIANCE, CovariateMatrix, assemble_sigma
from .linalg import chol_solve, chol_logdet, robust_cholesky, tri_solve
from .nnet import DTYPE, recon_loglik, sample_latent


@dataclass
class EventTimeBins:
    edges: np.ndarray
    times: np.ndarray  # mean event time per non-empty bin
    weights: np.ndarray  # bin count / total

    def __post_init__(self):
        if len(self.times) < 1 or len(self.times) != len(self.weights):
            raise ValueError("need at least one bin with matching times and weights")


def fit_bins(event_times, num_bins: int = 6) -> EventTimeBins:
    """Log-spaced bins over the observed event times; empty bins are dropped."""
    t = np.asarray(event_times, dtype=float)
    t = t[np.isfinite(t) & (t > 0)]
    if t.size == 0:
        raise ValueError("no positive event times to bin")
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    lo, hi = t.min(), t.max()
    if lo == hi:
        edges = np.array([lo, hi])
        return EventTimeBins(edges, np.array([lo]), np.array([1.0]))
    edges = np.geomspace(lo, hi, num_bins + 1)
    which = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, num_bins - 1)
    counts = np.bincount(which, minlength=num_bins)
    sums = np.bincount(which, weights=t, minlength=num_bins)
    keep = counts > 0
    return EventTimeBins(edges, sums[keep] / counts[keep], counts[keep] / counts.sum())


def event_times_from(X: CovariateMatrix, outcome="diseasePresence", time_since="diseaseAge", age="age"):
    """Per positive instance: the event age ``age - time_since`` (constant within an instance)."""
    out = []
    o, _ = X.column(outcome)
    ts, tp = X.column(time_since)
    a, _ = X.column(age)
    for _, s, e in X.instance_blocks:
        rows = torch.arange(s, e)
        pos = rows[(o[rows] == 1) & tp[rows]]
        if pos.numel():
            out.append(float((a[pos] - ts[pos]).mean()))
    return np.array(out)


def hypothesis_covariates(X: CovariateMatrix, outcome_value: int, event_time=None, outcome="diseasePresence",
                          time_since="diseaseAge", age="age"):
    """Copy of ``X`` with the outcome set and the time-since-event filled (or blanked)."""
    n = X.n
    Xh = X.with_column(outcome, torch.full((n,), float(outcome_value)), torch.ones(n, dtype=torch.bool))
    if outcome_value == 1 and event_time is not None:
        a, _ = X.column(age)
        return Xh.with_column(time_since, a - float(event_time), torch.ones(n, dtype=torch.bool))
    return Xh.with_column(time_since, torch.zeros(n), torch.zeros(n, dtype=torch.bool))


def _gauss_kl_full(mu, w, mean, C):
    """KL( N(mu, diag w) || N(mean, C) ) and the Cholesky factor of C."""
    L = robust_cholesky(C)
    d = tri_solve(L, mu - mean)
    tr = (torch.cholesky_inverse(L).diagonal() * w).sum()
    return 0.5 * (tr + d.dot(d) - mu.shape[0] + chol_logdet(L) - torch.log(w).sum()), L


class BayesClassifier:
    """Scores test instances against a frozen model conditioned on its training data."""

    def __init__(self, model, train_data, bins: EventTimeBins | None = None, num_bins: int = 6,
                 outcome="diseasePresence", time_since="diseaseAge", noise_seed: int = 0):
        names = model.schema.names
        if not any(names[f.column] == outcome for t in model.prior.terms for f in t.factors):
            raise ValueError(f"the model prior does not use the outcome covariate {outcome!r}")
        self.model, self.train = model, train_data
        self.outcome, self.time_since = outcome, time_since
        self.bins = bins if bins is not None else fit_bins(event_times_from(train_data.X, outcome, time_since), num_bins)
        self.noise_seed = noise_seed
        with torch.no_grad():
            self.mu, self.w = model.encode(train_data)
            self.chol = [robust_cholesky(assemble_sigma(model.prior, l, train_data.X, max(train_data.X.n, 1)))
                         for l in range(model.latent_dim)]

    def conditional_kl(self, mu_s, w_s, Xs: CovariateMatrix):
        prior, X = self.model.prior, self.train.X
        total = torch.zeros((), dtype=DTYPE)
        for l, Lt in enumerate(self.chol):
            K_sX = prior.gram_full(l, Xs, X)
            A = chol_solve(Lt, K_sX.T)
            C = prior.gram_full(l, Xs, Xs) + NOISE_VARIANCE * torch.eye(Xs.n, dtype=DTYPE) - K_sX @ A
            mean = A.T @ self.mu[:, l]
            kl, Lc = _gauss_kl_full(mu_s[:, l], w_s[:, l], mean, C)
            spread = (A * self.w[:, l, None]).T @ A
            total = total + kl + 0.5 * torch.trace(chol_solve(Lc, spread))
        return total

    def conditioned_elbo(self, obs, Xs: CovariateMatrix):
        """ELBO of one test instance under fully specified covariates ``Xs``."""
        with torch.no_grad():
            mu_s, w_s = self.model.encoder(obs.Y, obs.mask)
            gen = torch.Generator().manual_seed(self.noise_seed)
            z = sample_latent(mu_s, w_s, torch.randn(mu_s.shape, generator=gen, dtype=DTYPE))
            recon = recon_loglik(self.model.decoder, obs, z)
            return float(recon - self.conditional_kl(mu_s, w_s, Xs))

    def hypothesis_elbo(self, obs, Xs: CovariateMatrix, outcome_value: int) -> float:
        if outcome_value == 0:
            return self.conditioned_elbo(obs, hypothesis_covariates(Xs, 0, None, self.outcome, self.time_since))
        return float(sum(
            w * self.conditioned_elbo(obs, hypothesis_covariates(Xs, 1, t, self.outcome, self.time_since))
            for t, w in zip(self.bins.times, self.bins.weights)
        ))

    def score(self, obs, Xs: CovariateMatrix):
        """``(P(outcome = 1), L0, L1)`` for one test instance."""
        l0 = self.hypothesis_elbo(obs, Xs, 0)
        l1 = self.hypothesis_elbo(obs, Xs, 1)
        return predict_outcome_prob(l0, l1), l0, l1


def predict_outcome_prob(l0: float, l1: float) -> float:
    """P(outcome = 1) from the two hypothesis ELBOs (softmax over two classes)."""
    if l0 == -np.inf and l1 == -np.inf:
        raise ValueError("both hypothesis ELBOs are -inf")
    if np.isnan(l0) or np.isnan(l1):
        raise ValueError("hypothesis ELBO is NaN")
    if l1 == np.inf or l0 == -np.inf:
        return 1.0
    if l0 == np.inf or l1 == -np.inf:
        return 0.0
    return float(expit(l1 - l0))


def auroc(scores, labels) -> float:
    """Area under the ROC curve from ranks; tied scores count one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_permutation_pvalue(scores, labels, num_permutations: int = 2000, seed: int = 0) -> float:
    """One-sided p-value of the observed AUROC against label permutations."""
    rng = np.random.default_rng(seed)
    observed = auroc(scores, labels)
    labels = np.asarray(labels)
    hits = sum(auroc(scores, rng.permutation(labels)) >= observed for _ in range(num_permutations))
    return (hits + 1) / (num_permutations + 1)
