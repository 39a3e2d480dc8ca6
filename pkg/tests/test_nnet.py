import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import check_params
from lvae.nnet import (
    CKPT_VERSION, SIGMA_FLOOR, Decoder, Encoder, NonFiniteError, ObservationSet, decode, encode,
    gaussian_loglik, load_checkpoint, recon_loglik, sample_latent, save_checkpoint, zero_parameters,
)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def test_zero_networks():
    enc = zero_parameters(Encoder(5, 3, (4,), "identity", gen()))
    mu, var = encode(enc, ObservationSet.from_array(np.ones((2, 5))))
    assert torch.equal(mu, torch.zeros(2, 3, dtype=torch.float64))
    assert torch.equal(var, torch.ones(2, 3, dtype=torch.float64))
    dec = zero_parameters(Decoder(3, 5, (4,), "identity", gen()))
    mean, var = decode(dec, torch.randn(2, 3, dtype=torch.float64))
    assert torch.equal(mean, torch.zeros(2, 5, dtype=torch.float64))
    assert torch.equal(var, torch.ones(5, dtype=torch.float64))


def test_forward_is_deterministic_per_row():
    enc = Encoder(4, 2, (6,), "tanh", gen(1))
    y = torch.randn(1, 4, dtype=torch.float64).repeat(3, 1)
    mu, var = enc(y)
    assert torch.equal(mu[0], mu[1]) and torch.equal(mu[1], mu[2]) and torch.equal(var[0], var[2])
    mu2, _ = enc(y)
    assert torch.equal(mu, mu2)


def test_xavier_uniform_init_bounds():
    enc = Encoder(10, 2, (6,), "tanh", gen(2))
    w = enc.body.layers[0].weight.detach()
    assert float(w.abs().max()) <= math.sqrt(6 / 16)
    assert float(enc.body.layers[0].bias.detach().abs().max()) == 0.0


def test_encoder_ignores_masked_inputs():
    enc = Encoder(4, 2, (6,), "tanh", gen(3))
    y = torch.randn(2, 4, dtype=torch.float64)
    mask = torch.tensor([[True, False, True, True], [False, False, True, True]])
    a = enc(y, mask)
    b = enc(torch.where(mask, y, torch.full_like(y, 123.0)), mask)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_non_finite_activation_names_layer():
    enc = Encoder(3, 2, (4,), "identity", gen())
    with torch.no_grad():
        enc.body.layers[0].weight.fill_(1e308)
    with pytest.raises(NonFiniteError, match="encoder layer 0"):
        enc(torch.full((1, 3), 10.0, dtype=torch.float64))


def _fd_network(seed, activation):
    torch.manual_seed(seed)
    enc = Encoder(5, 2, (8, 4), activation, gen(seed))
    dec = Decoder(2, 5, (4, 8), activation, gen(seed + 1))
    with torch.no_grad():
        dec.log_var.copy_(torch.randn(5, dtype=torch.float64, generator=gen(seed + 2)) * 0.3)
    return enc, dec


@pytest.mark.parametrize("activation", ["tanh", "identity"])
def test_encoder_mean_jacobian_matches_finite_differences(activation):
    enc, _ = _fd_network(0, activation)
    y = torch.randn(3, 5, dtype=torch.float64, generator=gen(9))
    proj = torch.randn(3, 2, dtype=torch.float64, generator=gen(10))
    for j in range(2):  # one output coordinate at a time
        fn = lambda: (enc(y)[0][:, j] * proj[:, j]).sum()  # noqa: E731
        worst, count, failures = check_params(fn, list(enc.parameters()))
        assert count > 0 and not failures, failures


def test_reconstruction_gradients_match_finite_differences():
    enc, dec = _fd_network(4, "tanh")
    y = torch.randn(4, 5, dtype=torch.float64, generator=gen(11))
    mask = torch.rand(4, 5, generator=gen(12)) < 0.7
    obs = ObservationSet(y, mask)
    noise = torch.randn(4, 2, dtype=torch.float64, generator=gen(13))

    def fn():
        mu, var = encode(enc, obs)
        return recon_loglik(dec, obs, sample_latent(mu, var, noise))

    worst, count, failures = check_params(fn, list(enc.parameters()) + list(dec.parameters()))
    assert count > 0 and not failures, failures


@torch.no_grad()
def test_recon_closed_form_and_masking():
    dec = zero_parameters(Decoder(1, 1, (2,), "identity", gen()))
    z = torch.zeros(1, 1, dtype=torch.float64)
    obs = ObservationSet(torch.zeros(1, 1), torch.ones(1, 1, dtype=torch.bool))
    assert float(recon_loglik(dec, obs, z)) == pytest.approx(-0.9189385, abs=1e-7)
    empty = ObservationSet(torch.zeros(1, 1), torch.zeros(1, 1, dtype=torch.bool))
    assert float(recon_loglik(dec, empty, z)) == 0.0
    doubled = ObservationSet(torch.zeros(2, 1), torch.ones(2, 1, dtype=torch.bool))
    assert float(recon_loglik(dec, doubled, z.repeat(2, 1))) == pytest.approx(2 * -0.9189385, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), fill=st.floats(-1e6, 1e6))
def test_loss_invariant_to_masked_placeholders(seed, fill):
    rng = np.random.default_rng(seed)
    y = torch.as_tensor(rng.normal(size=(4, 3)))
    mask = torch.as_tensor(rng.random((4, 3)) < 0.6)
    mean, var = torch.as_tensor(rng.normal(size=(4, 3))), torch.as_tensor(rng.uniform(0.1, 2, size=3))
    a = gaussian_loglik(y, mask, mean, var)
    b = gaussian_loglik(torch.where(mask, y, torch.full_like(y, fill)), mask, mean, var)
    assert float(a) == float(b)


def test_sample_latent():
    mu = torch.tensor([1.0, -2.0], dtype=torch.float64)
    assert torch.equal(sample_latent(mu, torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64)), mu)
    z = sample_latent(mu, torch.zeros(2, dtype=torch.float64), torch.ones(2, dtype=torch.float64))
    torch.testing.assert_close(z - mu, torch.full((2,), SIGMA_FLOOR, dtype=torch.float64))
    n = 100_000
    var = torch.tensor([0.5, 2.0], dtype=torch.float64)
    draws = sample_latent(mu, var, torch.randn(n, 2, dtype=torch.float64, generator=gen(5)))
    se = torch.sqrt(var / n)
    assert torch.all((draws.mean(0) - mu).abs() < 4 * se)


def test_observation_set_stores_zero_at_missing():
    obs = ObservationSet.from_array(np.array([[1.0, np.nan], [np.nan, 2.0]]))
    assert obs.mask.tolist() == [[True, False], [False, True]]
    assert obs.Y.tolist() == [[1.0, 0.0], [0.0, 2.0]]
    np.testing.assert_array_equal(obs.to_array(), np.array([[1.0, np.nan], [np.nan, 2.0]]))
    with pytest.raises(ValueError):
        ObservationSet(torch.zeros(2, 2), torch.ones(3, 2, dtype=torch.bool))


def test_checkpoint_round_trip(tmp_path):
    arrays = {"b": torch.arange(6, dtype=torch.float64).reshape(2, 3), "a": torch.tensor([True, False])}
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"widths": [1, 2]}, arrays)
    doc = json.loads(path.read_text())
    assert doc["version"] == CKPT_VERSION
    assert doc["arrays"]["b"]["shape"] == [2, 3]
    arch, back = load_checkpoint(path)
    assert arch == {"widths": [1, 2]}
    assert torch.equal(back["b"], arrays["b"]) and torch.equal(back["a"], arrays["a"])
    doc["version"] = "other"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_checkpoint(path)
