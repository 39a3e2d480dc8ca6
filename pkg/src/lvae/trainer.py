"""Model container, objective and optimisation loops.

Bounds:

* ``exact``        -- dense KL, full-batch steps (one Adam step per epoch);
* ``D2``           -- structured bound with learned inducing rows, full batch;
* ``D4-minibatch`` -- uncollapsed bound on batches of whole instances, with a
  natural-gradient update of ``q(u)`` after every Adam step.

The reconstruction term uses one reparameterised sample per row.
"""

from __future__ import annotations

import copy
import math
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import kl as klmod
from .kernels import CONTINUOUS, AdditivePrior, CovariateMatrix, CovariateSchema, rows_view
from .linalg import robust_cholesky
from .nnet import DTYPE, Decoder, Encoder, ObservationSet, load_checkpoint, recon_loglik, sample_latent, save_checkpoint
from .predictive import LatentPredictive, predict_latent, predict_observation

BOUNDS = ("exact", "D2", "D4-minibatch")


class TrainingError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class ModelConfig:
    prior: str = "ca(id) + se(age) + ca_x_se(id,age) + ca_x_se(sex,age) + bi_x_se(diseasePresence,diseaseAge)"
    latent_dim: int = 4
    encoder_hidden: tuple = (32, 16)
    decoder_hidden: tuple = (16, 32)
    activation: str = "tanh"
    num_inducing: int = 16
    jitter: float = 1e-6

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        if self.latent_dim < 1 or self.num_inducing < 1:
            raise ValueError("latent_dim and num_inducing must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


@dataclass
class TrainConfig:
    bound: str = "D2"
    epochs: int = 300
    pretrain_epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gp_lr_factor: float = 0.1
    natgrad_step: float = 0.5
    patience: int = 0  # 0 = run to the epoch cap
    seed: int = 0

    def __post_init__(self):
        if self.bound not in BOUNDS:
            raise ValueError(f"bound must be one of {BOUNDS}, got {self.bound!r}")
        if self.epochs < 0 or self.pretrain_epochs < 0 or self.patience < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        for name in ("lr", "eps", "gp_lr_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 < self.natgrad_step <= 1:
            raise ValueError("natgrad_step must lie in (0, 1]")


@dataclass
class Dataset:
    obs: ObservationSet
    X: CovariateMatrix

    def __post_init__(self):
        if self.obs.n != self.X.n:
            raise ValueError(f"{self.obs.n} observation rows but {self.X.n} covariate rows")

    @property
    def num_instances(self):
        return len(self.X.instance_blocks)

    def instance_rows(self, which):
        blocks = self.X.instance_blocks
        return np.concatenate([np.arange(blocks[i][1], blocks[i][2]) for i in which]).astype(np.int64)

    def take_instances(self, which):
        rows = self.instance_rows(which)
        return Dataset(self.obs.take(rows), self.X.take(rows))

    def sizes(self):
        return {code: b - a for code, a, b in self.X.instance_blocks}


def instance_batches(num_instances, batch_size, rng):
    """Shuffled partition of instance indices into batches (the last may be smaller)."""
    order = rng.permutation(num_instances)
    return [order[i:i + batch_size] for i in range(0, num_instances, batch_size)]


def _distinct_rows(X: CovariateMatrix, M: int, seed: int):
    """Up to ``M`` rows with pairwise distinct non-id covariates (duplicates would make K_SS singular)."""
    keep = [j for j in range(X.schema.q) if j != X.schema.id_index]
    key = torch.where(X.present[:, keep], X.values[:, keep], torch.full((), float("nan"), dtype=DTYPE)).numpy()
    _, first = np.unique(np.nan_to_num(key, nan=-1e300), axis=0, return_index=True)
    first = np.sort(first)
    take = np.random.default_rng(seed).choice(len(first), size=min(M, len(first)), replace=False)
    return np.sort(first[take])


class LVAE(nn.Module):
    """Encoder, decoder, additive GP prior, inducing rows and ``q(u)``."""

    def __init__(self, schema: CovariateSchema, obs_dim: int, config: ModelConfig, X_init: CovariateMatrix | None = None,
                 seed: int = 0):
        super().__init__()
        self.schema, self.config, self.obs_dim = schema, config, int(obs_dim)
        gen = torch.Generator().manual_seed(int(seed))
        L = config.latent_dim
        self.encoder = Encoder(obs_dim, L, config.encoder_hidden, config.activation, gen)
        self.decoder = Decoder(L, obs_dim, config.decoder_hidden, config.activation, gen)
        self.prior = AdditivePrior.from_spec(config.prior, schema, L, X_init)
        M = config.num_inducing
        if X_init is not None:
            rows = _distinct_rows(X_init, M, seed)
            M = len(rows)
            self.config = config = ModelConfig(**{**asdict(config), "num_inducing": M})
            values, present = X_init.values[rows].clone(), X_init.present[rows].clone()
        else:
            values = torch.zeros(M, schema.q, dtype=DTYPE)
            present = torch.ones(M, schema.q, dtype=torch.bool)
        present[:, schema.id_index] = False
        values[:, schema.id_index] = 0.0
        self.S_values = nn.Parameter(values)
        self.register_buffer("S_present", present)
        cont = torch.tensor([k == CONTINUOUS for k in schema.kinds])
        self.register_buffer("S_trainable", cont[None, :] & present)
        self.S_values.register_hook(lambda g: g * self.S_trainable)
        self.register_buffer("q_m", torch.zeros(L, M, dtype=DTYPE))
        self.register_buffer("q_H", torch.eye(M, dtype=DTYPE).repeat(L, 1, 1))
        self.pretrained = False

    # --- structure -------------------------------------------------------

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def inducing(self):
        return rows_view(self.S_values, self.S_present)

    def inducing_state(self):
        return klmod.InducingState(self.inducing(), self.q_m, self.q_H)

    def set_inducing_posterior(self, state):
        with torch.no_grad():
            self.q_m.copy_(state.m)
            self.q_H.copy_(state.H)

    def reset_inducing_posterior(self):
        """q(u) <- prior over the inducing values."""
        with torch.no_grad():
            S = self.inducing()
            for l in range(self.latent_dim):
                Ls = robust_cholesky(self.prior.gram_low_rank(l, S, S), self.config.jitter)
                self.q_H[l].copy_(Ls @ Ls.T)
            self.q_m.zero_()

    def network_parameters(self):
        return list(self.encoder.parameters()) + list(self.decoder.parameters())

    def gp_parameters(self):
        return [self.prior.log_scale, self.prior.log_lengthscale, self.S_values]

    def architecture(self):
        return {
            "schema": [[n, k] for n, k in zip(self.schema.names, self.schema.kinds)],
            "id_name": self.schema.id_name,
            "obs_dim": self.obs_dim,
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()},
            "pretrained": self.pretrained,
        }

    # --- inference -------------------------------------------------------

    def encode(self, data: Dataset):
        return self.encoder(data.obs.Y, data.obs.mask)

    def save(self, path, meta=None):
        arch = self.architecture()
        if meta:
            arch["meta"] = meta
        save_checkpoint(path, arch, dict(self.state_dict()))

    @classmethod
    def load(cls, path):
        arch, arrays = load_checkpoint(path)
        schema = CovariateSchema.from_pairs([tuple(p) for p in arch["schema"]], id_name=arch["id_name"])
        model = cls(schema, arch["obs_dim"], ModelConfig(**arch["model"]))
        model.load_state_dict({k: v for k, v in arrays.items()})
        model.pretrained = bool(arch.get("pretrained", False))
        return model, arch


def latent_kl_term(model: LVAE, mu, var, X: CovariateMatrix, bound: str, p=None, n_total=None):
    jitter = model.config.jitter
    if bound == "exact":
        return klmod.latent_kl(klmod.EXACT, mu, var, model.prior, X, cap=max(X.n, klmod.DEFAULT_DENSE_CAP))
    if bound == "D2":
        return klmod.latent_kl(klmod.D2, mu, var, model.prior, X, S=model.inducing(), jitter=jitter)
    if bound == "D4-minibatch":
        return klmod.latent_kl(klmod.D4, mu, var, model.prior, X, state=model.inducing_state(), p=p,
                               n_total=n_total, jitter=jitter)
    if bound == "normal":
        return klmod.standard_normal_kl(mu, var)
    raise ValueError(f"unknown bound {bound!r}")


def elbo_terms(model: LVAE, data: Dataset, noise, bound: str, p=None, n_total=None):
    """``(recon, kl)`` for one batch; with ``p`` given the reconstruction is scaled by ``p / p_hat``."""
    mu, var = model.encode(data)
    z = sample_latent(mu, var, noise)
    recon = recon_loglik(model.decoder, data.obs, z)
    if p is not None:
        recon = recon * (p / data.num_instances)
    return recon, latent_kl_term(model, mu, var, data.X, bound, p, n_total)


def elbo_step(model: LVAE, data: Dataset, noise, bound: str, p=None, n_total=None):
    """Loss ``-(recon - KL)`` with gradients accumulated into every trainable parameter."""
    recon, kl = elbo_terms(model, data, noise, bound, p, n_total)
    loss = kl - recon
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss (recon={recon.item():.6g}, kl={kl.item():.6g}, bound={bound})")
    loss.backward()
    return loss.detach(), recon.detach(), kl.detach()


def _noise(gen, n, L):
    return torch.randn(n, L, generator=gen, dtype=DTYPE)


def _adam(params_groups, cfg: TrainConfig):
    return torch.optim.Adam(params_groups, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def _log(log, **rec):
    if log is not None:
        log(rec)


def pretrain(model: LVAE, data: Dataset, cfg: TrainConfig, epochs=None, log=None):
    """Fit encoder and decoder under a standard-normal prior; GP parameters are not touched."""
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _adam([{"params": model.network_parameters()}], cfg)
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        total = 0.0
        for batch_idx in instance_batches(data.num_instances, cfg.batch_size, rng):
            batch = data.take_instances(batch_idx)
            opt.zero_grad(set_to_none=True)
            loss, _, _ = elbo_step(model, batch, _noise(gen, batch.X.n, model.latent_dim), "normal")
            opt.step()
            total += float(loss)
        history.append(total)
        _log(log, phase="pretrain", epoch=epoch, train_loss=total, wall_time=time.perf_counter() - t0)
    if epochs > 0:
        model.pretrained = True
    model.reset_inducing_posterior()
    return history


def natural_gradient_update(model: LVAE, data: Dataset, p: int, step: float):
    with torch.no_grad():
        mu, var = model.encode(data)
        state = model.inducing_state()
        g_m, g_H = [], []
        for l in range(model.latent_dim):
            gm, gh = klmod.d4_gradients(mu[:, l], var[:, l], model.prior, l, data.X, state, data.num_instances, p,
                                        model.config.jitter)
            g_m.append(gm)
            g_H.append(gh)
        model.set_inducing_posterior(klmod.natural_gradient_step(state, (torch.stack(g_m), torch.stack(g_H)), step))


def optimise_inducing_posterior(model: LVAE, data: Dataset):
    """Set q(u) to its full-batch optimum (one unit natural-gradient step)."""
    natural_gradient_update(model, data, data.num_instances, 1.0)


def validation_loss(model: LVAE, data: Dataset, bound: str, noise):
    """Negative ELBO on ``data`` (full batch); D4 is validated with its collapsed form D2."""
    with torch.no_grad():
        b = "D2" if bound == "D4-minibatch" else bound
        recon, kl = elbo_terms(model, data, noise, b)
        return float(kl - recon), float(recon), float(kl)


def train(model: LVAE, train_data: Dataset, val_data: Dataset | None, cfg: TrainConfig, log=None):
    """Optimise the L-VAE objective; the model is left at the best-validation snapshot.

    Returns a dict with per-epoch history, the best epoch and its loss.
    """
    if not model.pretrained:
        warnings.warn("training an L-VAE from an un-pretrained model", stacklevel=2)
    rng = np.random.default_rng(cfg.seed + 1)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    val_gen = torch.Generator().manual_seed(cfg.seed + 2)
    val_noise = _noise(val_gen, val_data.X.n, model.latent_dim) if val_data is not None else None
    groups = [{"params": model.network_parameters()},
              {"params": model.gp_parameters(), "lr": cfg.lr * cfg.gp_lr_factor}]
    if cfg.bound == "exact":
        groups[1]["params"] = [model.prior.log_scale, model.prior.log_lengthscale]
    opt = _adam(groups, cfg)
    P, N = train_data.num_instances, train_data.X.n
    minibatch = cfg.bound == "D4-minibatch"
    if minibatch:
        model.reset_inducing_posterior()
        optimise_inducing_posterior(model, train_data)
    best = {"epoch": -1, "val_loss": math.inf, "state": copy.deepcopy(model.state_dict())}
    history = []
    stale = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        tot_loss = tot_recon = tot_kl = 0.0
        try:
            if minibatch:
                batches = instance_batches(P, cfg.batch_size, rng)
                for batch_idx in batches:
                    batch = train_data.take_instances(np.sort(batch_idx))
                    opt.zero_grad(set_to_none=True)
                    loss, recon, kl = elbo_step(model, batch, _noise(gen, batch.X.n, model.latent_dim), cfg.bound, P, N)
                    opt.step()
                    natural_gradient_update(model, batch, P, cfg.natgrad_step)
                    tot_loss += float(loss) / len(batches)
                    tot_recon += float(recon) / len(batches)
                    tot_kl += float(kl) / len(batches)
            else:
                opt.zero_grad(set_to_none=True)
                loss, recon, kl = elbo_step(model, train_data, _noise(gen, N, model.latent_dim), cfg.bound)
                opt.step()
                tot_loss, tot_recon, tot_kl = float(loss), float(recon), float(kl)
            if val_data is not None:
                val = validation_loss(model, val_data, cfg.bound, val_noise)[0]
            else:
                val = tot_loss
        except (TrainingError, klmod.CholeskyError, FloatingPointError) as exc:
            model.load_state_dict(best["state"])
            raise TrainingError(f"epoch {epoch}: {exc}", snapshot=best) from exc
        if not math.isfinite(val):
            model.load_state_dict(best["state"])
            raise TrainingError(f"epoch {epoch}: non-finite validation loss", snapshot=best)
        rec = {"phase": "train", "epoch": epoch, "train_loss": tot_loss, "recon": tot_recon, "kl": tot_kl,
               "val_loss": val, "wall_time": time.perf_counter() - t0}
        history.append(rec)
        _log(log, **rec)
        if val < best["val_loss"]:
            best = {"epoch": epoch, "val_loss": val, "state": copy.deepcopy(model.state_dict())}
            stale = 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    model.load_state_dict(best["state"])
    return {"history": history, "best_epoch": best["epoch"], "best_val_loss": best["val_loss"]}


# --- downstream ---------------------------------------------------------------


def impute(model: LVAE, obs: ObservationSet) -> ObservationSet:
    """Fill masked entries with the decoded encoder mean; observed entries pass through."""
    with torch.no_grad():
        mu, _ = model.encoder(obs.Y, obs.mask)
        mean, _ = model.decoder(mu)
        Y = torch.where(obs.mask, obs.Y, mean)
    return ObservationSet(Y, torch.ones_like(obs.mask))


def latent_predictive(model: LVAE, train_data: Dataset, Xq: CovariateMatrix, cap=None) -> LatentPredictive:
    with torch.no_grad():
        mu, var = model.encode(train_data)
    kwargs = {} if cap is None else {"cap": cap}
    return predict_latent(Xq, train_data.X, mu, var, model.prior, S=model.inducing(), jitter=model.config.jitter,
                          **kwargs)


def predict(model: LVAE, train_data: Dataset, Xq: CovariateMatrix, mc_samples: int = 25, seed: int = 0):
    """Observation-space predictive ``(mean, variance)`` at query covariate rows."""
    return predict_observation(latent_predictive(model, train_data, Xq), model.decoder, mc_samples, seed)


__all__ = [
    "BOUNDS", "ModelConfig", "TrainConfig", "Dataset", "LVAE", "TrainingError", "instance_batches", "elbo_terms",
    "elbo_step", "pretrain", "train", "validation_loss", "natural_gradient_update", "optimise_inducing_posterior",
    "impute", "latent_predictive", "predict",
]
