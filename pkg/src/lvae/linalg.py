"""Small dense linear-algebra helpers shared by the GP code.

Everything works on float64 torch tensors and broadcasts over leading batch
dimensions, so the per-instance blocks of a longitudinal covariance can be
factorised in one call.
"""

from __future__ import annotations

import torch

JITTER_START = 1e-8
JITTER_MAX = 1e-4


class CholeskyError(RuntimeError):
    """Raised when a matrix stays non-PD after the maximum jitter."""


def robust_cholesky(A: torch.Tensor, base_jitter: float = 0.0) -> torch.Tensor:
    """Lower Cholesky factor of ``A`` (batched), adding jitter only on failure.

    Jitter is relative to the mean diagonal: ``1e-8 * mean(diag)``, escalated
    by 10x up to ``1e-4 * mean(diag)``. ``base_jitter`` (also relative) is
    always added first.
    """
    A = 0.5 * (A + A.transpose(-1, -2))
    n = A.shape[-1]
    eye = torch.eye(n, dtype=A.dtype)
    scale = A.diagonal(dim1=-2, dim2=-1).mean(-1).abs().clamp_min(1e-300)
    scale = scale[..., None, None]
    if base_jitter > 0:
        A = A + base_jitter * scale.detach() * eye
    L, info = torch.linalg.cholesky_ex(A)
    if not bool((info > 0).any()):
        return L
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        L, info = torch.linalg.cholesky_ex(A + jitter * scale.detach() * eye)
        if not bool((info > 0).any()):
            return L
        jitter *= 10
    raise CholeskyError(
        f"matrix of size {n} not positive definite after jitter {JITTER_MAX:g}*mean(diag)"
    )


def chol_solve(L: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Solve ``(L L^T) X = B``; ``B`` may be a vector (last dim = n)."""
    if B.dim() == L.dim() - 1:
        return torch.cholesky_solve(B.unsqueeze(-1), L).squeeze(-1)
    return torch.cholesky_solve(B, L)


def tri_solve(L: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Solve ``L X = B`` for lower-triangular ``L``."""
    if B.dim() == L.dim() - 1:
        return torch.linalg.solve_triangular(L, B.unsqueeze(-1), upper=False).squeeze(-1)
    return torch.linalg.solve_triangular(L, B, upper=False)


def chol_logdet(L: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(L.diagonal(dim1=-2, dim2=-1)).sum(-1)


def chol_inverse(L: torch.Tensor) -> torch.Tensor:
    return torch.cholesky_inverse(L)


def sym(A: torch.Tensor) -> torch.Tensor:
    return 0.5 * (A + A.transpose(-1, -2))
