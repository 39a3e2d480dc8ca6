import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import query_rows, spanning_case
from lvae.kernels import HEALTH_SCHEMA, AdditivePrior, CovariateMatrix, eval_term
from lvae.kl import InducingState, d4_gradients, natural_gradient_step
from lvae.nnet import Decoder
from lvae.predictive import (
    LatentPredictive, predict_latent, predict_latent_exact, predict_latent_sparse,
    predict_latent_variational, predict_observation,
)
from lvae.predictive import _Structure

NAN = float("nan")


def fixed_point_state(X, prior, mu, w, S):
    M = S.values.shape[0]
    L = prior.latent_dim
    state = InducingState(S, torch.zeros(L, M, dtype=torch.float64), torch.eye(M, dtype=torch.float64).repeat(L, 1, 1))
    P = len(X.instance_blocks)
    g = [d4_gradients(mu[:, l], w[:, l], prior, l, X, state, P, P) for l in range(L)]
    return natural_gradient_step(state, (torch.stack([a for a, _ in g]), torch.stack([b for _, b in g])), 1.0)


def _toy(w_value=0.3):
    rows = np.array([[0, 0.0, 0, 0, NAN, 0], [0, 1.0, 0, 0, NAN, 0], [1, 0.5, 1, 0, NAN, 0]])
    X = CovariateMatrix(HEALTH_SCHEMA, rows)
    prior = AdditivePrior.from_spec("se(age) + ca(id)", HEALTH_SCHEMA, 1)
    with torch.no_grad():
        prior.log_scale.copy_(torch.log(torch.tensor([[1.5, 0.7]], dtype=torch.float64)))
        prior.log_lengthscale.copy_(torch.log(torch.tensor([[0.8]], dtype=torch.float64)))
    mu = torch.tensor([[0.4], [-1.0], [2.0]], dtype=torch.float64)
    w = torch.full((3, 1), w_value, dtype=torch.float64)
    return rows, X, prior, mu, w


def _numpy_oracle(rows, q, prior, mu, w):
    terms = prior.terms
    scales = prior.log_scale.detach().exp().numpy()[0]
    ell = float(prior.log_lengthscale.detach().exp()[0, 0])

    def k(a, b):
        return sum(eval_term(t, list(a), list(b), float(s), ell) for t, s in zip(terms, scales))

    K = np.array([[k(a, b) for b in rows] for a in rows])
    Sigma = K + np.eye(len(rows))
    kq = np.array([k(q, b) for b in rows])
    A = np.linalg.solve(Sigma, kq)
    mean = A @ mu
    var = k(q, q) - kq @ A + A @ np.diag(w) @ A + 1.0
    return mean, var


@pytest.mark.parametrize("w_value", [0.3, 1e-12])
def test_exact_matches_hand_assembled_dense(w_value):
    rows, X, prior, mu, w = _toy(w_value)
    queries = np.array([[0, 2.0, 0, 0, NAN, 0], [1, 0.5, 1, 0, NAN, 0], [7, 0.2, 0, 0, NAN, 1]])
    pred = predict_latent_exact(CovariateMatrix(HEALTH_SCHEMA, queries, require_id=False), X, mu, w, prior)
    for i, q in enumerate(queries):
        m, v = _numpy_oracle(rows, q, prior, mu[:, 0].numpy(), w[:, 0].numpy())
        assert float(pred.mean[i, 0]) == pytest.approx(m, abs=1e-12)
        assert float(pred.var[i, 0]) == pytest.approx(v, abs=1e-12)


def test_zero_cross_covariance_gives_prior_predictive():
    rows, X, prior, mu, w = _toy()
    prior = AdditivePrior.from_spec("ca(id) + ca_x_se(id,age)", HEALTH_SCHEMA, 1)
    q = CovariateMatrix(HEALTH_SCHEMA, np.array([[9, 0.0, 0, 0, NAN, 0]]))
    pred = predict_latent_exact(q, X, mu, w, prior)
    assert float(pred.mean[0, 0]) == 0.0
    assert float(pred.var[0, 0]) == pytest.approx(2.0 + 1.0, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_sparse_matches_exact_with_spanning_inducing_rows(seed):
    rng, X, prior, mu, w, S = spanning_case(seed)
    Xq, k = query_rows(rng, X)
    e = predict_latent_exact(Xq, X, mu, w, prior)
    s = predict_latent_sparse(Xq, X, mu, w, prior, S)
    torch.testing.assert_close(s.mean, e.mean, rtol=0, atol=1e-6)
    # the sparse covariance is exact only on rows the inducing set spans
    torch.testing.assert_close(s.var[:k], e.var[:k], rtol=0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_variational_mean_at_fixed_point_matches_sparse(seed):
    rng, X, prior, mu, w, S = spanning_case(seed)
    Xq, _ = query_rows(rng, X)
    state = fixed_point_state(X, prior, mu, w, S)
    v = predict_latent_variational(Xq, X, mu, w, prior, state)
    s = predict_latent_sparse(Xq, X, mu, w, prior, S)
    torch.testing.assert_close(v.mean, s.mean, rtol=0, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_predictive_variance_floor(seed):
    rng, X, prior, mu, w, S = spanning_case(seed)
    Xq, _ = query_rows(rng, X)
    for pred in (predict_latent_exact(Xq, X, mu, w, prior), predict_latent_sparse(Xq, X, mu, w, prior, S),
                 predict_latent_variational(Xq, X, mu, w, prior, fixed_point_state(X, prior, mu, w, S))):
        assert float(pred.var.min()) >= 1.0 - 1e-8


def test_unseen_id_has_no_instance_contribution():
    rng, X, prior, mu, w, S = spanning_case(3)
    Xq, k = query_rows(rng, X)
    fresh = CovariateMatrix(HEALTH_SCHEMA, Xq.values[k:], Xq.present[k:], require_id=False)
    for l in range(prior.latent_dim):
        st_ = _Structure(fresh, X, prior, l)
        assert torch.count_nonzero(st_.KR) == 0 and torch.count_nonzero(st_.R) == 0
    s = predict_latent_sparse(fresh, X, mu, w, prior, S)
    e = predict_latent_exact(fresh, X, mu, w, prior)
    torch.testing.assert_close(s.mean, e.mean, rtol=0, atol=1e-8)


def test_variational_with_zero_mean_and_unseen_id():
    rng, X, prior, mu, w, S = spanning_case(4)
    M = S.values.shape[0]
    L = prior.latent_dim
    state = InducingState(S, torch.zeros(L, M, dtype=torch.float64), torch.eye(M, dtype=torch.float64).repeat(L, 1, 1))
    far = CovariateMatrix(HEALTH_SCHEMA, np.array([[10_000, 500.0, 0, 0, NAN, 0]]), require_id=False)
    v = predict_latent_variational(far, X, mu, w, prior, state)
    assert torch.all(v.mean == 0)
    assert float(v.var.min()) >= 1.0


def test_latent_dimensions_are_independent():
    rng, X, prior, mu, w, S = spanning_case(5)
    Xq, _ = query_rows(rng, X)
    a = predict_latent_exact(Xq, X, mu, w, prior)
    swapped = AdditivePrior(prior.schema, prior.terms, 2, prior.log_scale.detach().flip(0),
                            prior.log_lengthscale.detach().flip(0))
    b = predict_latent_exact(Xq, X, mu.flip(1), w.flip(1), swapped)
    torch.testing.assert_close(b.mean, a.mean.flip(1), rtol=1e-12, atol=1e-14)
    torch.testing.assert_close(b.var, a.var.flip(1), rtol=1e-12, atol=1e-14)


def test_route_selection():
    rng, X, prior, mu, w, S = spanning_case(6)
    Xq, _ = query_rows(rng, X)
    exact = predict_latent_exact(Xq, X, mu, w, prior)
    assert torch.equal(predict_latent(Xq, X, mu, w, prior, S=S).mean, exact.mean)
    sparse = predict_latent(Xq, X, mu, w, prior, S=S, cap=0)
    assert torch.equal(sparse.mean, predict_latent_sparse(Xq, X, mu, w, prior, S).mean)


def _linear_decoder(L, D, seed=0):
    return Decoder(L, D, (), "identity", torch.Generator().manual_seed(seed))


def test_observation_prediction_reproducible_and_validated():
    dec = Decoder(2, 3, (4,), "tanh", torch.Generator().manual_seed(1))
    lat = LatentPredictive(torch.randn(4, 2, dtype=torch.float64), torch.rand(4, 2, dtype=torch.float64) + 0.5)
    a = predict_observation(lat, dec, mc_samples=1, seed=7)
    b = predict_observation(lat, dec, mc_samples=1, seed=7)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    with pytest.raises(ValueError):
        predict_observation(lat, dec, mc_samples=0)


def test_observation_prediction_degenerate_latent():
    dec = Decoder(2, 3, (4,), "tanh", torch.Generator().manual_seed(2))
    mean = torch.randn(4, 2, dtype=torch.float64)
    lat = LatentPredictive(mean, torch.zeros(4, 2, dtype=torch.float64))
    mc_mean, mc_var = predict_observation(lat, dec, 5)
    with torch.no_grad():
        exact_mean, noise = dec(mean)
    assert torch.equal(predict_observation(lat, dec, 1)[0], exact_mean)
    torch.testing.assert_close(mc_mean, exact_mean, rtol=0, atol=1e-15)
    torch.testing.assert_close(mc_var, noise.expand_as(exact_mean), rtol=0, atol=1e-15)


def test_linear_decoder_pushforward():
    dec = _linear_decoder(2, 3)
    mean = torch.tensor([[0.3, -1.2]], dtype=torch.float64)
    var = torch.tensor([[0.8, 0.2]], dtype=torch.float64)
    n = 10_000
    mc_mean, _ = predict_observation(LatentPredictive(mean, var), dec, n, seed=3)
    with torch.no_grad():
        target, _ = dec(mean)
        Wt = dec.out.weight
        se = torch.sqrt((Wt * Wt * var).sum(1) / n)
    assert torch.all((mc_mean[0] - target[0]).abs() < 3 * se)
