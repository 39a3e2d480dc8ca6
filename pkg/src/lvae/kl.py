"""KL divergence between the encoder posterior and the additive GP prior.

For one latent dimension the encoder gives ``N(mu, diag(w))`` over the N
training rows and the prior is ``N(0, Sigma)`` with
``Sigma = K_A + blockdiag(Sigma_hat_p)``. This module provides

* ``kl_exact``        -- dense closed form, O(N^3);
* ``bound_d1``        -- the upper bound induced by the collapsed Titsias bound;
* ``bound_d2_dense``  -- the structured low-rank + block-diagonal bound, dense;
* ``bound_d2``        -- the same bound via Woodbury, O(sum n_p^3 + N M^2);
* ``svi_d4_full`` / ``svi_d4_minibatch`` -- the uncollapsed bound with an
  explicit Gaussian ``q(u) = N(m, H)`` over inducing values, and its unbiased
  per-instance mini-batch estimate;
* ``d4_gradients`` / ``natural_gradient_step`` -- closed-form gradients and
  natural-gradient updates for ``(m, H)``.

All functions return 0-dim float64 tensors and are differentiable w.r.t.
``mu``, ``w``, the prior parameters and the inducing locations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import torch

from .kernels import NOISE_VARIANCE, AdditivePrior, CovariateMatrix, DEFAULT_DENSE_CAP, assemble_sigma, rows_view, split_structure
from .linalg import CholeskyError, chol_inverse, chol_logdet, chol_solve, robust_cholesky, sym, tri_solve

EXACT, D1, D2, D4 = "exact", "D1", "D2", "D4"


@dataclass
class InducingState:
    """Inducing locations plus the per-dimension Gaussian ``q(u) = N(m, H)``.

    ``S`` is any row set with ``values``/``present`` tensors (M x Q); its id
    column is never read by the low-rank terms. ``m`` is (L, M), ``H`` is
    (L, M, M).
    """

    S: object
    m: torch.Tensor
    H: torch.Tensor

    def __post_init__(self):
        M = self.S.values.shape[0]
        if M < 1:
            raise ValueError("need at least one inducing point")
        if self.m.shape[-1] != M or self.H.shape[-2:] != (M, M):
            raise ValueError("m/H do not match the number of inducing points")

    @property
    def num_inducing(self) -> int:
        return self.S.values.shape[0]


def _check_moments(mu, w, n):
    if mu.shape != (n,) or w.shape != (n,):
        raise ValueError(f"moments must have shape ({n},), got {tuple(mu.shape)} and {tuple(w.shape)}")


# ---------------------------------------------------------------------------
# dense forms
# ---------------------------------------------------------------------------


def kl_exact(mu: torch.Tensor, w: torch.Tensor, Sigma: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag w) || N(0, Sigma) ) via Cholesky."""
    n = mu.shape[0]
    _check_moments(mu, w, n)
    L = robust_cholesky(Sigma)
    Linv_mu = tri_solve(L, mu)
    Sinv_diag = chol_inverse(L).diagonal()
    return 0.5 * ((Sinv_diag * w).sum() + Linv_mu.dot(Linv_mu) - n + chol_logdet(L) - torch.log(w).sum())


def kl_exact_prior(mu, w, prior: AdditivePrior, l: int, X: CovariateMatrix, cap: int = DEFAULT_DENSE_CAP):
    return kl_exact(mu, w, assemble_sigma(prior, l, X, cap))


def bound_d1(mu, w, prior: AdditivePrior, l: int, X: CovariateMatrix, S_full, jitter: float = 0.0):
    """KL bound from the collapsed Titsias lower bound on the full kernel.

    ``S_full`` lives in the full covariate space (the id column matters).
    """
    n = X.n
    _check_moments(mu, w, n)
    K_SS = prior.gram_full(l, S_full, S_full)
    K_XS = prior.gram_full(l, X, S_full)
    Ls = robust_cholesky(K_SS, jitter)
    A = tri_solve(Ls, K_XS.T)  # M x N
    Q = A.T @ A
    Sigma_q = Q + NOISE_VARIANCE * torch.eye(n, dtype=torch.float64)
    trace = (prior.diag_full(l, X) - (A * A).sum(0)).sum()
    return kl_exact(mu, w, Sigma_q) + trace / (2.0 * NOISE_VARIANCE)


def bound_d2_dense(mu, w, prior: AdditivePrior, l: int, X: CovariateMatrix, S, jitter: float = 0.0):
    """Structured bound with fully dense algebra (reference path)."""
    n = X.n
    _check_moments(mu, w, n)
    K_A, blocks = split_structure(prior, l, X)
    K_SS = prior.gram_low_rank(l, S, S)
    K_XS = prior.gram_low_rank(l, X, S)
    Ls = robust_cholesky(K_SS, jitter)
    A = tri_solve(Ls, K_XS.T)
    Qa = A.T @ A
    Sigma_bar = Qa + torch.block_diag(*blocks)
    K_tilde = K_A - Qa
    trace = torch.zeros((), dtype=torch.float64)
    for (_, a, b), B in zip(X.instance_blocks, blocks):
        trace = trace + torch.trace(torch.linalg.solve(B, K_tilde[a:b, a:b]))
    return kl_exact(mu, w, Sigma_bar) + 0.5 * trace


# ---------------------------------------------------------------------------
# efficient structured bound
# ---------------------------------------------------------------------------


@dataclass
class _BlockFactors:
    """Per-group Cholesky factors of Sigma_hat and the matching row sets."""

    groups: list  # (size, members, rows, chol (G,s,s), Xg view)


def _block_factors(prior: AdditivePrior, l: int, X: CovariateMatrix) -> _BlockFactors:
    groups = []
    for size, members, rows in X.layout.groups:
        Xg = rows_view(X.values[rows], X.present[rows])
        B = prior.gram_block(l, Xg, Xg) + NOISE_VARIANCE * torch.eye(size, dtype=torch.float64)
        groups.append((size, members, rows, robust_cholesky(B), Xg))
    return _BlockFactors(groups)


def _low_rank_parts(prior, l, S, jitter):
    Ls = robust_cholesky(prior.gram_low_rank(l, S, S), jitter)
    return Ls @ Ls.T, Ls


def bound_d2(mu, w, prior: AdditivePrior, l: int, X: CovariateMatrix, S, jitter: float = 0.0):
    """Structured bound via Woodbury and the matrix determinant lemma.

    Never forms an N x N matrix: blocks are factorised per instance and the
    low-rank correction lives in the whitened M x M system
    ``B = I + Ls^-1 K_SX Sh^-1 K_XS Ls^-T`` (eigenvalues >= 1, so an
    ill-conditioned ``K_SS`` does not leak into the determinant).
    """
    n = X.n
    _check_moments(mu, w, n)
    _, Ls = _low_rank_parts(prior, l, S, jitter)
    M = Ls.shape[0]
    C = torch.zeros(M, M, dtype=torch.float64)  # Phi^T Sh^-1 Phi
    T = torch.zeros(M, M, dtype=torch.float64)  # Phi^T Sh^-1 W Sh^-1 Phi
    bvec = torch.zeros(M, dtype=torch.float64)  # Phi^T Sh^-1 mu
    tr_w = torch.zeros((), dtype=torch.float64)
    quad = torch.zeros((), dtype=torch.float64)
    logdet_hat = torch.zeros((), dtype=torch.float64)
    tr_ka = torch.zeros((), dtype=torch.float64)
    for size, members, rows, Lb, Xg in _block_factors(prior, l, X).groups:
        mu_g, w_g = mu[rows], w[rows]  # (G, s)
        Phi = torch.linalg.solve_triangular(Ls.T, prior.gram_low_rank(l, Xg, S), upper=True, left=False)  # K_gS Ls^-T
        Binv = chol_inverse(Lb)  # (G, s, s), s is small
        BinvPhi = Binv @ Phi
        Binv_mu = (Binv @ mu_g.unsqueeze(-1)).squeeze(-1)
        C = C + (Phi.transpose(-1, -2) @ BinvPhi).sum(0)
        T = T + (BinvPhi.transpose(-1, -2) @ (w_g.unsqueeze(-1) * BinvPhi)).sum(0)
        bvec = bvec + (Phi.transpose(-1, -2) @ Binv_mu.unsqueeze(-1)).squeeze(-1).sum(0)
        tr_w = tr_w + (Binv.diagonal(dim1=-2, dim2=-1) * w_g).sum()
        quad = quad + (mu_g * Binv_mu).sum()
        logdet_hat = logdet_hat + chol_logdet(Lb).sum()
        K_gg = prior.gram_low_rank(l, Xg, Xg)
        tr_ka = tr_ka + (Binv * K_gg).sum()  # tr(B^-1 K) with both symmetric
    Lv = robust_cholesky(torch.eye(M, dtype=torch.float64) + C)
    tr_w = tr_w - torch.trace(chol_solve(Lv, T))
    Lv_b = tri_solve(Lv, bvec)
    quad = quad - Lv_b.dot(Lv_b)
    logdet = logdet_hat + chol_logdet(Lv)
    tr_tilde = tr_ka - torch.trace(C)
    return 0.5 * (tr_w + quad - n + logdet - torch.log(w).sum() + tr_tilde)


# ---------------------------------------------------------------------------
# uncollapsed SVI bound
# ---------------------------------------------------------------------------


def _gauss_kl(m, H, Ls):
    """KL( N(m, H) || N(0, Ls Ls^T) )."""
    M = m.shape[0]
    Lh = robust_cholesky(H)
    KinvH = chol_solve(Ls, H)
    a = tri_solve(Ls, m)
    return 0.5 * (torch.trace(KinvH) + a.dot(a) - M + chol_logdet(Ls) - chol_logdet(Lh))


def _instance_sum(mu, w, prior, l, X, S, Ls, m, H):
    """Sum over the instances in ``X`` of the per-instance D4 terms (without the 1/2)."""
    Kinv_m = chol_solve(Ls, m)
    Kinv_H_Kinv = chol_solve(Ls, chol_solve(Ls, H).T)  # K^-1 H K^-1 (symmetric)
    total = torch.zeros((), dtype=torch.float64)
    for size, members, rows, Lb, Xg in _block_factors(prior, l, X).groups:
        mu_g, w_g = mu[rows], w[rows]
        K_gS = prior.gram_low_rank(l, Xg, S)
        Binv = chol_inverse(Lb)
        resid = K_gS @ Kinv_m - mu_g  # (G, s)
        quad = (resid * (Binv @ resid.unsqueeze(-1)).squeeze(-1)).sum()
        tr_w = (Binv.diagonal(dim1=-2, dim2=-1) * w_g).sum()
        logdet = chol_logdet(Lb).sum()
        A = tri_solve(Ls, K_gS.transpose(-1, -2))  # (G, M, s)
        K_tilde = prior.gram_low_rank(l, Xg, Xg) - A.transpose(-1, -2) @ A
        tr_tilde = (Binv * K_tilde).sum()
        C_g = K_gS.transpose(-1, -2) @ Binv @ K_gS  # (G, M, M)
        tr_h = (Kinv_H_Kinv * C_g).sum()
        total = total + quad + tr_w + logdet + tr_tilde + tr_h - torch.log(w_g).sum()
    return total


def svi_d4_full(mu, w, prior: AdditivePrior, l: int, X: CovariateMatrix, state: InducingState, jitter: float = 0.0):
    """Uncollapsed bound over all instances for latent dimension ``l``."""
    return svi_d4_minibatch(mu, w, prior, l, X, state, len(X.instance_blocks), len(X.instance_blocks), X.n, jitter=jitter)


def svi_d4_minibatch(mu_sub, w_sub, prior: AdditivePrior, l: int, X_sub: CovariateMatrix, state: InducingState,
                     p_hat: int, p: int, n_total: int, sizes: Mapping[int, int] | None = None, jitter: float = 0.0):
    """Unbiased estimate of the uncollapsed bound from whole instances.

    The per-instance sum is scaled by ``p / p_hat``; ``-n_total/2`` and the
    ``q(u)`` KL are added once. ``sizes`` (id -> full row count), when given,
    is used to reject batches that split an instance.
    """
    _check_moments(mu_sub, w_sub, X_sub.n)
    blocks = X_sub.instance_blocks
    if len(blocks) != p_hat:
        raise ValueError(f"batch holds {len(blocks)} instances but p_hat={p_hat}")
    if sizes is not None:
        for code, a, b in blocks:
            if sizes.get(code) != b - a:
                raise ValueError(f"instance {code} is split across batches")
    S = state.S
    _, Ls = _low_rank_parts(prior, l, S, jitter)
    m, H = state.m[l], state.H[l]
    inst = _instance_sum(mu_sub, w_sub, prior, l, X_sub, S, Ls, m, H)
    return 0.5 * (p / p_hat) * inst - 0.5 * n_total + _gauss_kl(m, H, Ls)


def d4_gradients(mu_sub, w_sub, prior: AdditivePrior, l: int, X_sub: CovariateMatrix, state: InducingState,
                 p_hat: int, p: int, jitter: float = 0.0):
    """Closed-form ``(dD4/dm, dD4/dH)`` of the mini-batch estimate for dimension ``l``."""
    with torch.no_grad():
        S = state.S
        _, Ls = _low_rank_parts(prior, l, S, jitter)
        Kinv = chol_inverse(Ls)
        C = torch.zeros_like(Kinv)
        b = torch.zeros(Kinv.shape[0], dtype=torch.float64)
        for size, members, rows, Lb, Xg in _block_factors(prior, l, X_sub).groups:
            K_gS = prior.gram_low_rank(l, Xg, S)
            BinvK = torch.cholesky_solve(K_gS, Lb)
            C = C + (K_gS.transpose(-1, -2) @ BinvK).sum(0)
            b = b + (BinvK.transpose(-1, -2) @ mu_sub[rows].unsqueeze(-1)).squeeze(-1).sum(0)
        scale = p / p_hat
        A = scale * (Kinv @ C @ Kinv) + Kinv
        m, H = state.m[l], state.H[l]
        g_m = -scale * (Kinv @ b) + A @ m
        g_H = 0.5 * (A - torch.linalg.inv(H))
        return g_m, sym(g_H)


def natural_gradient_step(state: InducingState, grads, step: float, max_halvings: int = 10) -> InducingState:
    """One natural-gradient update of every dimension's ``(m, H)``.

    ``grads`` is ``(g_m (L, M), g_H (L, M, M))``. A step that would make the
    new precision indefinite is halved, up to ``max_halvings`` times.
    """
    g_m, g_H = grads
    if not 0.0 <= step <= 1.0:
        raise ValueError("natural-gradient step must lie in [0, 1]")
    if step == 0.0:
        return replace(state, m=state.m.clone(), H=state.H.clone())
    new_m, new_H = [], []
    with torch.no_grad():
        for l in range(state.m.shape[0]):
            H, m = state.H[l], state.m[l]
            Hinv = sym(torch.linalg.inv(H))
            s = step
            for _ in range(max_halvings + 1):
                prec = sym(Hinv + 2.0 * s * g_H[l])
                Lp, info = torch.linalg.cholesky_ex(prec)
                if int(info) == 0:
                    break
                s *= 0.5
            else:
                raise CholeskyError("natural-gradient precision stayed indefinite after step halving")
            H_new = sym(torch.cholesky_inverse(Lp))
            robust_cholesky(H_new)  # PSD check under the jitter policy
            theta1 = Hinv @ m - s * (g_m[l] - 2.0 * g_H[l] @ m)
            new_m.append(H_new @ theta1)
            new_H.append(H_new)
    return replace(state, m=torch.stack(new_m), H=torch.stack(new_H))


def optimal_inducing_posterior(mu, prior: AdditivePrior, l: int, X: CovariateMatrix, S, jitter: float = 0.0):
    """Full-batch optimum of q(u): ``H = A^-1``, ``m = A^-1 K^-1 K_SX Sh^-1 mu``."""
    with torch.no_grad():
        _, Ls = _low_rank_parts(prior, l, S, jitter)
        Kinv = chol_inverse(Ls)
        C = torch.zeros_like(Kinv)
        b = torch.zeros(Kinv.shape[0], dtype=torch.float64)
        for size, members, rows, Lb, Xg in _block_factors(prior, l, X).groups:
            K_gS = prior.gram_low_rank(l, Xg, S)
            BinvK = torch.cholesky_solve(K_gS, Lb)
            C = C + (K_gS.transpose(-1, -2) @ BinvK).sum(0)
            b = b + (BinvK.transpose(-1, -2) @ mu[rows].unsqueeze(-1)).squeeze(-1).sum(0)
        A = sym(Kinv @ C @ Kinv + Kinv)
        La = robust_cholesky(A)
        H = sym(torch.cholesky_inverse(La))
        m = H @ (Kinv @ b)
        return m, H


# ---------------------------------------------------------------------------
# totals over latent dimensions
# ---------------------------------------------------------------------------

_PER_DIM: dict[str, Callable] = {
    EXACT: kl_exact_prior,
    D1: bound_d1,
    D2: bound_d2,
    D4: svi_d4_minibatch,
}


def kl_total(kind: str, per_dim: Sequence[Mapping]) -> torch.Tensor:
    """Sum the chosen per-dimension quantity over latent dimensions.

    Each entry of ``per_dim`` holds keyword arguments for the per-dimension
    function; an optional ``"kind"`` key must agree with ``kind``.
    """
    if kind not in _PER_DIM:
        raise ValueError(f"unknown bound kind {kind!r}")
    total = torch.zeros((), dtype=torch.float64)
    for args in per_dim:
        args = dict(args)
        k = args.pop("kind", kind)
        if k != kind:
            raise ValueError(f"mixed bound kinds: {kind!r} and {k!r}")
        total = total + _PER_DIM[kind](**args)
    return total


def latent_kl(kind: str, mu: torch.Tensor, w: torch.Tensor, prior: AdditivePrior, X: CovariateMatrix,
              S=None, state: InducingState | None = None, p: int | None = None, n_total: int | None = None,
              jitter: float = 0.0, cap: int = DEFAULT_DENSE_CAP) -> torch.Tensor:
    """KL term of the ELBO summed over dimensions; ``mu``/``w`` are (N, L)."""
    L = mu.shape[1]
    per_dim = []
    for l in range(L):
        args = dict(mu=mu[:, l], w=w[:, l], prior=prior, l=l, X=X)
        if kind == EXACT:
            args["cap"] = cap
        elif kind in (D1, D2):
            args["S_full" if kind == D1 else "S"] = S
            args["jitter"] = jitter
        elif kind == D4:
            args.update(mu_sub=args.pop("mu"), w_sub=args.pop("w"), X_sub=args.pop("X"), state=state,
                        p_hat=len(X.instance_blocks), p=p if p is not None else len(X.instance_blocks),
                        n_total=n_total if n_total is not None else X.n, jitter=jitter)
        per_dim.append(args)
    return kl_total(kind, per_dim)


def standard_normal_kl(mu: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag w) || N(0, I) ) summed over all entries."""
    return 0.5 * (w + mu * mu - 1.0 - torch.log(w)).sum()


__all__ = [
    "InducingState", "kl_exact", "kl_exact_prior", "bound_d1", "bound_d2_dense", "bound_d2",
    "svi_d4_full", "svi_d4_minibatch", "d4_gradients", "natural_gradient_step",
    "optimal_inducing_posterior", "kl_total", "latent_kl", "standard_normal_kl"
]
