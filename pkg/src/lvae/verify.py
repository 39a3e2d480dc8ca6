"""Seeded random problem instances and the bound-ordering report.

Instances use irregular (continuous) ages so the low-rank kernel over any
subset of rows is full rank. Each record checks kl_exact <= D2 <= D1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .kernels import HEALTH_SCHEMA, AdditivePrior, CovariateMatrix, rows_view
from .kl import (
    InducingState,
    bound_d1,
    bound_d2,
    bound_d2_dense,
    d4_gradients,
    kl_exact_prior,
    natural_gradient_step,
    svi_d4_full,
)

RANDOM_PRIOR = "ca(id) + se(age) + ca_x_se(id,age) + ca_x_se(sex,age) + bi_x_se(diseasePresence,diseaseAge)"


@dataclass
class Instance:
    seed: int
    prior: AdditivePrior
    X: CovariateMatrix
    mu: torch.Tensor
    w: torch.Tensor
    S_rows: np.ndarray

    @property
    def S(self):
        return self.X.take(self.S_rows)

    @property
    def S_low_rank(self):
        # the id column is irrelevant for the low-rank terms: mark it missing
        S = self.X.take(self.S_rows)
        present = S.present.clone()
        present[:, S.schema.id_index] = False
        return rows_view(S.values, present)


def random_covariates(rng: np.random.Generator, sizes, age_range: float = 10.0, id_offset: int = 0) -> CovariateMatrix:
    rows = []
    for p, n in enumerate(sizes):
        ages = np.sort(rng.uniform(0.0, age_range, size=n))
        sex = float(rng.integers(0, 2))
        diseased = rng.random() < 0.5
        onset = rng.uniform(0.25 * age_range, 0.75 * age_range)
        loc = float(rng.integers(0, 2))
        for a in ages:
            rows.append([id_offset + p, a, sex, 1.0 if diseased else 0.0, a - onset if diseased else np.nan, loc])
    return CovariateMatrix(HEALTH_SCHEMA, np.array(rows))


def random_prior(rng: np.random.Generator, X: CovariateMatrix, latent_dim: int = 1, spec: str = RANDOM_PRIOR):
    prior = AdditivePrior.from_spec(spec, HEALTH_SCHEMA, latent_dim)
    with torch.no_grad():
        prior.log_scale.copy_(torch.as_tensor(rng.uniform(np.log(0.2), np.log(2.0), size=prior.log_scale.shape)))
        prior.log_lengthscale.copy_(torch.as_tensor(rng.uniform(np.log(1.0), np.log(4.0), size=prior.log_lengthscale.shape)))
    return prior


def _well_conditioned_subset(rng, prior, X, M, max_cond=1e7, tries=50):
    n = X.n
    for _ in range(tries):
        rows = np.sort(rng.choice(n, size=M, replace=False))
        S = X.take(rows)
        K = prior.gram_low_rank(0, S, S).detach()
        if torch.linalg.cond(K) < max_cond:
            return rows
        M = max(1, M - 1)
    return np.array([0])


def random_instance(seed: int, max_n: int = 60, max_p: int = 6, max_np: int = 12, max_m: int = 10) -> Instance:
    rng = np.random.default_rng(seed)
    P = int(rng.integers(1, max_p + 1))
    cap = max(1, min(max_np, max_n // P))
    sizes = [int(rng.integers(1, cap + 1)) for _ in range(P)]
    X = random_covariates(rng, sizes)
    prior = random_prior(rng, X)
    M = int(rng.integers(1, min(max_m, X.n) + 1))
    S_rows = _well_conditioned_subset(rng, prior, X, M)
    mu = torch.as_tensor(rng.normal(size=X.n))
    w = torch.as_tensor(rng.uniform(0.1, 2.0, size=X.n))
    return Instance(seed, prior, X, mu, w, S_rows)


def d4_at_optimum(inst: Instance) -> float:
    S = inst.S_low_rank
    M = S.values.shape[0]
    state = InducingState(S, torch.zeros(1, M, dtype=torch.float64), torch.eye(M, dtype=torch.float64)[None])
    P = len(inst.X.instance_blocks)
    g = d4_gradients(inst.mu, inst.w, inst.prior, 0, inst.X, state, P, P)
    state = natural_gradient_step(state, (g[0][None], g[1][None]), 1.0)
    return float(svi_d4_full(inst.mu, inst.w, inst.prior, 0, inst.X, state))


def bound_record(seed: int) -> dict:
    inst = random_instance(seed)
    with torch.no_grad():
        kl = float(kl_exact_prior(inst.mu, inst.w, inst.prior, 0, inst.X))
        d1 = float(bound_d1(inst.mu, inst.w, inst.prior, 0, inst.X, inst.S))
        d2d = float(bound_d2_dense(inst.mu, inst.w, inst.prior, 0, inst.X, inst.S_low_rank))
        d2 = float(bound_d2(inst.mu, inst.w, inst.prior, 0, inst.X, inst.S_low_rank))
        d4 = d4_at_optimum(inst)
    return {
        "seed": seed,
        "N": inst.X.n,
        "P": len(inst.X.instance_blocks),
        "M": int(len(inst.S_rows)),
        "kl_exact": kl,
        "D1": d1,
        "D2_dense": d2d,
        "D2_efficient": d2,
        "D4_at_optimum": d4,
        "slack_D2_minus_kl": d2 - kl,
        "slack_D1_minus_D2": d1 - d2,
        "rel_err_D2": abs(d2 - d2d) / max(abs(d2d), 1e-300),
        "abs_err_D4_D2": abs(d4 - d2),
    }


def verify_bounds(seeds, tol: float = 1e-8) -> tuple[list[dict], int, float]:
    """Records for every seed, the number of ordering violations, wall time."""
    t0 = time.perf_counter()
    records = [bound_record(int(s)) for s in seeds]
    violations = sum(r["slack_D2_minus_kl"] < -tol or r["slack_D1_minus_D2"] < -tol for r in records)
    return records, violations, time.perf_counter() - t0
