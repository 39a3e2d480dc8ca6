"""Predictive distribution of latent codes at new covariate rows.

Training rows enter through the encoder moments ``mu`` (N, L) and ``w``
(N, L). Three routes are provided:

* exact       -- dense GP conditioning on ``N(0, Sigma)``;
* sparse      -- the same conditioning with ``K_A`` replaced by its Nystrom
                 approximation through inducing rows ``S``; the mean follows
                 the Woodbury recipe and only touches ``Sigma_hat`` blockwise;
* variational -- mean and variance from an explicit ``q(u) = N(m, H)``.

Query rows whose id matches a training instance pick up that instance's
id-specific terms; unseen ids contribute nothing through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .kernels import NOISE_VARIANCE, DEFAULT_DENSE_CAP, AdditivePrior, CovariateMatrix, assemble_sigma, rows_view
from .linalg import chol_inverse, chol_solve, robust_cholesky
from .nnet import Decoder

EXACT_ROUTE_MAX_N = 2000


@dataclass
class LatentPredictive:
    mean: torch.Tensor  # (n*, L)
    var: torch.Tensor  # (n*, L)

    def __post_init__(self):
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and variance shapes differ")
        if not (torch.isfinite(self.mean).all() and torch.isfinite(self.var).all()):
            raise FloatingPointError("non-finite predictive moments")


def _stack(cols):
    means, variances = zip(*cols)
    return LatentPredictive(torch.stack(means, 1), torch.stack(variances, 1))


def _exact_dim(Xq, X, mu, w, prior, l, cap):
    L = robust_cholesky(assemble_sigma(prior, l, X, cap))
    K_qX = prior.gram_full(l, Xq, X)
    A = chol_solve(L, K_qX.T)  # Sigma^-1 K_Xq, (N, n*)
    mean = A.T @ mu
    var = prior.diag_full(l, Xq) - (K_qX * A.T).sum(1) + (A * A * w[:, None]).sum(0) + NOISE_VARIANCE
    return mean, var


def predict_latent_exact(Xq, X: CovariateMatrix, mu, w, prior: AdditivePrior, cap: int = DEFAULT_DENSE_CAP):
    """Dense predictive mean and variance for every latent dimension."""
    with torch.no_grad():
        return _stack(_exact_dim(Xq, X, mu[:, l], w[:, l], prior, l, cap) for l in range(prior.latent_dim))


class _Structure:
    """Per-instance inverses of Sigma_hat and the id-specific cross-covariance to the queries."""

    def __init__(self, Xq, X, prior, l):
        self.blocks = []  # (start, stop, Sigma_hat_p^-1)
        for _, a, b in X.instance_blocks:
            Xp = rows_view(X.values[a:b], X.present[a:b])
            B = prior.gram_block(l, Xp, Xp) + NOISE_VARIANCE * torch.eye(b - a, dtype=torch.float64)
            self.blocks.append((a, b, chol_inverse(robust_cholesky(B))))
        # K_R between queries and training rows is nonzero only where ids match
        n_q = Xq.values.shape[0]
        self.R = torch.zeros(n_q, X.n, dtype=torch.float64)  # K^R_{*X} Sigma_hat^-1
        self.KR = torch.zeros(n_q, X.n, dtype=torch.float64)  # K^R_{*X}
        if prior.block_terms:
            q_ids = Xq.values[:, X.schema.id_index]
            q_has = Xq.present[:, X.schema.id_index]
            for (code, a, b), (_, _, Binv) in zip(X.instance_blocks, self.blocks):
                hit = torch.nonzero(q_has & (q_ids == code)).flatten()
                if hit.numel() == 0:
                    continue
                Xh = rows_view(Xq.values[hit], Xq.present[hit])
                Xp = rows_view(X.values[a:b], X.present[a:b])
                K = prior.gram_block(l, Xh, Xp)
                self.KR[hit, a:b] = K
                self.R[hit, a:b] = K @ Binv

    def solve(self, v):
        """Sigma_hat^-1 v for v of shape (N,) or (N, k)."""
        out = torch.empty_like(v)
        for a, b, Binv in self.blocks:
            out[a:b] = Binv @ v[a:b]
        return out


def _sparse_dim(Xq, X, mu, w, prior, l, S, jitter):
    st = _Structure(Xq, X, prior, l)
    Ls = robust_cholesky(prior.gram_low_rank(l, S, S), jitter)
    K_SS = Ls @ Ls.T
    K_XS = prior.gram_low_rank(l, X, S)
    K_qS = prior.gram_low_rank(l, Xq, S)
    E = st.solve(K_XS).T  # K_SX Sigma_hat^-1, (M, N)
    Lv = robust_cholesky(K_SS + E @ K_XS)

    # mean
    a = st.solve(mu)  # 1
    b = K_XS.T @ a
    low = K_XS @ chol_solve(Lv, b)  # 2
    mu_t = a - st.solve(low)  # 3
    s = chol_solve(Ls, K_XS.T @ mu_t)
    mean = K_qS @ s  # 4
    mean = mean + st.KR @ mu_t  # 5, 6

    # variance: the inducing-posterior form at its optimum, plus the spread of the
    # mean map over the encoder variances
    B = K_qS - st.R @ K_XS  # (n*, M)
    Vinv_Bt = chol_solve(Lv, B.T)
    kr_diag = prior.diag_block(l, Xq)
    var = (B * Vinv_Bt.T).sum(1) + NOISE_VARIANCE + kr_diag - (st.R * st.KR).sum(1)
    G = Vinv_Bt.T @ E + st.R  # d mean / d mu, (n*, N)
    var = var + (G * G * w[None, :]).sum(1)
    return mean, var


def predict_latent_sparse(Xq, X: CovariateMatrix, mu, w, prior: AdditivePrior, S, jitter: float = 0.0):
    """Predictive moments with the low-rank part routed through inducing rows ``S``."""
    with torch.no_grad():
        return _stack(_sparse_dim(Xq, X, mu[:, l], w[:, l], prior, l, S, jitter) for l in range(prior.latent_dim))


def _variational_dim(Xq, X, mu, prior, l, S, m, H, jitter):
    st = _Structure(Xq, X, prior, l)
    Ls = robust_cholesky(prior.gram_low_rank(l, S, S), jitter)
    K_XS = prior.gram_low_rank(l, X, S)
    K_qS = prior.gram_low_rank(l, Xq, S)
    Kinv_m = chol_solve(Ls, m)
    mean = K_qS @ Kinv_m + st.R @ (mu - K_XS @ Kinv_m)
    B = K_qS - st.R @ K_XS
    BK = chol_solve(Ls, B.T).T  # B K_SS^-1
    var = ((BK @ H) * BK).sum(1) + NOISE_VARIANCE + prior.diag_block(l, Xq) - (st.R * st.KR).sum(1)
    return mean, var


def predict_latent_variational(Xq, X: CovariateMatrix, mu, w, prior: AdditivePrior, state, jitter: float = 0.0):
    """Predictive moments from the inducing posterior in ``state`` (``w`` is unused by this form)."""
    with torch.no_grad():
        return _stack(
            _variational_dim(Xq, X, mu[:, l], prior, l, state.S, state.m[l], state.H[l], jitter)
            for l in range(prior.latent_dim)
        )


def predict_latent(Xq, X, mu, w, prior, S=None, cap: int = EXACT_ROUTE_MAX_N, jitter: float = 0.0):
    """Exact route up to ``cap`` training rows, sparse beyond (needs ``S``)."""
    if X.n <= cap or S is None:
        return predict_latent_exact(Xq, X, mu, w, prior, cap=max(cap, X.n))
    return predict_latent_sparse(Xq, X, mu, w, prior, S, jitter)


def predict_observation(latent: LatentPredictive, decoder: Decoder, mc_samples: int = 25, seed: int = 0):
    """Monte-Carlo push-forward of the latent predictive through the decoder.

    Returns per-row ``(mean, variance)`` in observation space; the variance is
    the decoder noise plus the spread of the decoded samples.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be at least 1")
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        eps = torch.randn((mc_samples,) + tuple(latent.mean.shape), generator=gen, dtype=torch.float64)
        z = latent.mean + torch.sqrt(latent.var.clamp_min(0.0)) * eps
        means, noise = decoder(z)
        mean = means.mean(0)
        spread = ((means - mean) ** 2).mean(0)
        return mean, noise.expand_as(mean) + spread
