import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lvae.kernels import (
    BIN, CAT, HEALTH_SCHEMA, SE, AdditivePrior, CovariateMatrix, CovariateSchema, Factor, KernelTerm,
    assemble_sigma, block_diag, eval_term, gram, is_psd, parse_terms, split_structure,
)
from lvae.verify import random_covariates, random_prior

SE_AGE = KernelTerm(SE, (Factor(SE, 1),))
CA_ID = KernelTerm(CAT, (Factor(CAT, 0),))
BI_DIS = KernelTerm(BIN, (Factor(BIN, 3),))
ID_AGE = KernelTerm("INTERACTION", (Factor(CAT, 0), Factor(SE, 1)))


def row(id_=0, age=0.0, sex=0, dis=0, dage=float("nan"), loc=0):
    return [id_, age, sex, dis, dage, loc]


def test_se_identity_and_closed_form():
    assert eval_term(SE_AGE, row(age=2.0), row(age=2.0)) == 1.0
    assert eval_term(SE_AGE, row(age=0.0), row(age=1.0)) == pytest.approx(0.6065307, abs=1e-7)


def test_categorical_and_binary_cases():
    assert eval_term(CA_ID, row(id_=3), row(id_=5)) == 0.0
    assert eval_term(BI_DIS, row(dis=1), row(dis=1)) == 1.0
    assert eval_term(BI_DIS, row(dis=1), row(dis=0)) == 0.0
    # any value other than 1 counts as "not 1"
    assert eval_term(BI_DIS, row(dis=2), row(dis=2)) == 0.0


def test_missing_covariate_gives_exact_zero():
    assert eval_term(SE_AGE, row(age=1.0), row(age=float("nan"))) == 0.0
    term = KernelTerm("INTERACTION", (Factor(BIN, 3), Factor(SE, 4)))
    assert eval_term(term, row(dis=1, dage=0.0), row(dis=1)) == 0.0


def test_interaction_is_scaled_product():
    a, b = row(id_=1, age=0.0), row(id_=1, age=2.0)
    assert eval_term(ID_AGE, a, b, scale=3.0, lengthscale=2.0) == pytest.approx(3.0 * math.exp(-0.5))
    assert eval_term(ID_AGE, a, row(id_=2, age=0.0), scale=3.0) == 0.0


def test_bad_parameters_rejected():
    with pytest.raises(ValueError):
        eval_term(SE_AGE, row(), row(), scale=float("inf"))
    with pytest.raises(ValueError):
        eval_term(SE_AGE, row(), row(), lengthscale=0.0)


def test_interaction_structure_rules():
    with pytest.raises(ValueError):
        KernelTerm("INTERACTION", (Factor(SE, 1),))
    with pytest.raises(ValueError):
        KernelTerm("INTERACTION", (Factor(SE, 1), Factor(SE, 4)))


def test_schema_rules():
    with pytest.raises(ValueError):
        CovariateSchema(("a", "a"), ("categorical", "continuous"))
    with pytest.raises(ValueError):
        CovariateSchema(("id", "x"), ("continuous", "continuous"))


def test_parse_terms():
    terms = parse_terms("ca(id) + se(age) + ca_x_se(id,age)", HEALTH_SCHEMA)
    assert [t.kind for t in terms] == [CAT, SE, "INTERACTION"]
    with pytest.raises(ValueError):
        parse_terms("se(sex)", HEALTH_SCHEMA)
    with pytest.raises(KeyError):
        parse_terms("se(height)", HEALTH_SCHEMA)


def test_covariate_matrix_requires_contiguous_present_id():
    with pytest.raises(ValueError):
        CovariateMatrix(HEALTH_SCHEMA, np.array([row(id_=float("nan"))]))
    with pytest.raises(ValueError):
        CovariateMatrix(HEALTH_SCHEMA, np.array([row(id_=0), row(id_=1), row(id_=0)]))


def _X(rng, sizes):
    return random_covariates(rng, sizes)


def test_gram_matches_entrywise_oracle():
    rng = np.random.default_rng(0)
    X = _X(rng, [5])
    raw = X.values.numpy().copy()
    raw[~X.present.numpy()] = np.nan
    K = gram(SE_AGE, X, X, scale=1.3, lengthscale=0.7)
    oracle = np.array([[eval_term(SE_AGE, list(a), list(b), 1.3, 0.7) for b in raw] for a in raw])
    np.testing.assert_allclose(K.numpy(), oracle, rtol=1e-12, atol=0)


def test_gram_id_blocks():
    X = CovariateMatrix(HEALTH_SCHEMA, np.array([row(0, 0.0), row(0, 1.0), row(1, 0.0), row(1, 1.0)]))
    K = gram(CA_ID, X, X).numpy()
    np.testing.assert_array_equal(K, np.kron(np.eye(2), np.ones((2, 2))))


def test_gram_entry_cap():
    X = CovariateMatrix(HEALTH_SCHEMA, np.array([row(0, 0.0), row(0, 1.0)]))
    with pytest.raises(MemoryError):
        gram(SE_AGE, X, X, max_entries=3)


def test_noise_only_sigma_is_identity():
    X = _X(np.random.default_rng(1), [3, 2])
    prior = AdditivePrior.from_spec("", HEALTH_SCHEMA, 1)
    torch.testing.assert_close(assemble_sigma(prior, 0, X), torch.eye(5, dtype=torch.float64))


def test_single_id_term_hand_assembly():
    X = CovariateMatrix(HEALTH_SCHEMA, np.array([row(0, 0.0), row(0, 1.0), row(1, 0.0), row(1, 1.0)]))
    prior = AdditivePrior.from_spec("ca(id)", HEALTH_SCHEMA, 1)
    block = np.ones((2, 2)) + np.eye(2)
    np.testing.assert_array_equal(assemble_sigma(prior, 0, X).detach().numpy(), np.kron(np.eye(2), block))
    K_A, blocks = split_structure(prior, 0, X)
    assert float(K_A.abs().max()) == 0.0
    assert len(blocks) == 2


def test_dense_cap():
    X = _X(np.random.default_rng(2), [4])
    prior = AdditivePrior.from_spec("se(age)", HEALTH_SCHEMA, 1)
    with pytest.raises(MemoryError):
        assemble_sigma(prior, 0, X, cap=3)


def test_lengthscale_initialised_to_half_range():
    X = CovariateMatrix(HEALTH_SCHEMA, np.array([row(0, 2.0), row(0, 10.0)]))
    prior = AdditivePrior.from_spec("se(age)", HEALTH_SCHEMA, 2, X)
    torch.testing.assert_close(prior.lengthscale(1, 0), torch.tensor(4.0, dtype=torch.float64))
    torch.testing.assert_close(prior.scale(0, 0), torch.tensor(1.0, dtype=torch.float64))


sizes_st = st.lists(st.integers(1, 5), min_size=1, max_size=4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), sizes=sizes_st)
def test_decomposition_symmetry_psd(seed, sizes):
    rng = np.random.default_rng(seed)
    X = _X(rng, sizes)
    prior = random_prior(rng, X)
    with torch.no_grad():
        Sigma = assemble_sigma(prior, 0, X)
        K_A, blocks = split_structure(prior, 0, X)
        torch.testing.assert_close(K_A + block_diag(blocks), Sigma, rtol=1e-12, atol=1e-12)
        assert torch.equal(Sigma, Sigma.T)
        for r in range(len(prior.terms)):
            K = prior.term_gram(0, r, X, X)
            assert torch.equal(K, K.T)
            assert is_psd(K)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), sizes=sizes_st)
def test_scale_linearity(seed, sizes):
    rng = np.random.default_rng(seed)
    X = _X(rng, sizes)
    prior = random_prior(rng, X)
    with torch.no_grad():
        for r in range(len(prior.terms)):
            K = prior.term_gram(0, r, X, X)
            prior.log_scale[0, r] += math.log(2.0)
            torch.testing.assert_close(prior.term_gram(0, r, X, X), 2 * K, rtol=1e-14, atol=0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), sizes=sizes_st)
def test_missing_entries_are_exactly_zero(seed, sizes):
    rng = np.random.default_rng(seed)
    X = _X(rng, sizes)
    prior = random_prior(rng, X)
    with torch.no_grad():
        for r, t in enumerate(prior.terms):
            K = prior.term_gram(0, r, X, X)
            miss = ~X.present[:, list(t.covariate_indices)].all(1)
            assert torch.all(K[miss] == 0) and torch.all(K[:, miss] == 0)
