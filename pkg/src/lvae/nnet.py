"""Encoder and decoder networks, masked Gaussian reconstruction, checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu, "identity": lambda x: x}
SIGMA_FLOOR = 1e-6
CKPT_VERSION = "lvae-ckpt-1"
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    pass


def _linear(fan_in, fan_out, gen):
    layer = nn.Linear(fan_in, fan_out, dtype=DTYPE)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        layer.bias.zero_()
    return layer


class MLP(nn.Module):
    """Stack of affine layers with a shared hidden activation."""

    def __init__(self, widths, activation="tanh", gen=None, name="mlp"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        widths = [int(w) for w in widths]
        if len(widths) < 1 or min(widths) < 1:
            raise ValueError("layer widths must be positive")
        self.widths = widths
        self.activation = activation
        self.name = name
        self.layers = nn.ModuleList(_linear(a, b, gen) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x):
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = act(layer(x))
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activation in {self.name} layer {i}")
        return x


class Encoder(nn.Module):
    """Maps an observation row (missing entries as 0) to latent means and variances."""

    def __init__(self, obs_dim, latent_dim, hidden=(32, 16), activation="tanh", gen=None):
        super().__init__()
        self.obs_dim, self.latent_dim = int(obs_dim), int(latent_dim)
        self.hidden, self.activation = tuple(int(h) for h in hidden), activation
        self.body = MLP((self.obs_dim, *self.hidden), activation, gen, "encoder")
        width = self.hidden[-1] if self.hidden else self.obs_dim
        self.mean_head = _linear(width, self.latent_dim, gen)
        self.logvar_head = _linear(width, self.latent_dim, gen)

    def forward(self, y, mask=None):
        if mask is not None:
            y = torch.where(mask, y, torch.zeros((), dtype=y.dtype))
        h = self.body(y)
        mu, logvar = self.mean_head(h), self.logvar_head(h)
        var = torch.exp(logvar)
        if not (torch.isfinite(mu).all() and torch.isfinite(var).all()):
            raise NonFiniteError("non-finite activation in encoder output heads")
        return mu, var


class Decoder(nn.Module):
    """Maps a latent code to observation means; per-dimension noise variances are free parameters."""

    def __init__(self, latent_dim, obs_dim, hidden=(16, 32), activation="tanh", gen=None):
        super().__init__()
        self.obs_dim, self.latent_dim = int(obs_dim), int(latent_dim)
        self.hidden, self.activation = tuple(int(h) for h in hidden), activation
        self.body = MLP((self.latent_dim, *self.hidden), activation, gen, "decoder")
        width = self.hidden[-1] if self.hidden else self.latent_dim
        self.out = _linear(width, self.obs_dim, gen)
        self.log_var = nn.Parameter(torch.zeros(self.obs_dim, dtype=DTYPE))

    def forward(self, z):
        mean = self.out(self.body(z))
        if not torch.isfinite(mean).all():
            raise NonFiniteError("non-finite activation in decoder output head")
        return mean, torch.exp(self.log_var)


def zero_parameters(module: nn.Module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


@dataclass
class ObservationSet:
    """Observation matrix with a mask (True = observed); masked entries hold 0."""

    Y: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        self.Y = torch.as_tensor(self.Y, dtype=DTYPE)
        self.mask = torch.as_tensor(self.mask, dtype=torch.bool)
        if self.Y.ndim != 2 or self.Y.shape != self.mask.shape:
            raise ValueError(f"Y {tuple(self.Y.shape)} and mask {tuple(self.mask.shape)} must be equal-shaped matrices")
        if not torch.isfinite(self.Y[self.mask]).all():
            raise ValueError("observed entries must be finite")
        self.Y = torch.where(self.mask, self.Y, torch.zeros((), dtype=DTYPE))

    @classmethod
    def from_array(cls, Y):
        """NaN marks a missing entry."""
        Y = torch.as_tensor(np.asarray(Y, dtype=float), dtype=DTYPE)
        mask = ~torch.isnan(Y)
        return cls(torch.nan_to_num(Y, nan=0.0), mask)

    @property
    def n(self):
        return self.Y.shape[0]

    @property
    def d(self):
        return self.Y.shape[1]

    def take(self, rows):
        rows = torch.as_tensor(np.asarray(rows), dtype=torch.long)
        return ObservationSet(self.Y[rows], self.mask[rows])

    def to_array(self):
        out = self.Y.detach().numpy().copy()
        out[~self.mask.numpy()] = np.nan
        return out


def encode(encoder: Encoder, obs: ObservationSet):
    return encoder(obs.Y, obs.mask)


def decode(decoder: Decoder, z):
    return decoder(z)


def sample_latent(mu, var, noise):
    sigma = torch.sqrt(var).clamp_min(SIGMA_FLOOR)
    return mu + sigma * noise


def gaussian_loglik(y, mask, mean, var):
    """Sum of log N(y | mean, var) over observed entries; masked entries contribute exactly 0."""
    ll = -0.5 * (LOG_2PI + torch.log(var) + (y - mean) ** 2 / var)
    return torch.where(mask, ll, torch.zeros((), dtype=ll.dtype)).sum()


def recon_loglik(decoder: Decoder, obs: ObservationSet, Z):
    mean, var = decoder(Z)
    return gaussian_loglik(obs.Y, obs.mask, mean, var)


# checkpoints ---------------------------------------------------------------

def _encode_array(t: torch.Tensor):
    a = t.detach().cpu().numpy()
    return {"shape": list(a.shape), "dtype": str(a.dtype), "data": [float(v) for v in a.ravel()]}


def _decode_array(entry):
    a = np.asarray(entry["data"], dtype=entry["dtype"]).reshape(entry["shape"])
    return torch.as_tensor(a)


def checkpoint_dict(architecture: dict, arrays: dict) -> dict:
    return {
        "version": CKPT_VERSION,
        "architecture": architecture,
        "arrays": {k: _encode_array(v) for k, v in sorted(arrays.items())},
    }


def save_checkpoint(path, architecture: dict, arrays: dict):
    """Write named arrays plus an architecture descriptor as deterministic JSON."""
    text = json.dumps(checkpoint_dict(architecture, arrays), sort_keys=True, separators=(",", ":"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    return doc["architecture"], {k: _decode_array(v) for k, v in doc["arrays"].items()}
