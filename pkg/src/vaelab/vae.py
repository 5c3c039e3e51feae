"""Variational autoencoder objective: encoder, reparameterized sampling,
closed-form KL, decoder likelihoods, training step and likelihood estimates.

Everything here is functional over a :class:`VaeModel`; the estimator classes
in :mod:`vaelab.estimators` wrap these with fit/transform plumbing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .nn import AdamState, DenseLayer, Mlp, NonFiniteError, adam_step, forward

LOG_VAR_BOUNDS = (-10.0, 10.0)
FAMILIES = ("bernoulli", "gaussian")


@dataclass
class GaussianPosterior:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ad.ShapeError(f"mu {self.mu.shape} vs log_var {self.log_var.shape}")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var.data)


@dataclass
class ElboTerms:
    """Batch-mean objective pieces, in nats. ``total = recon - kl``."""

    recon: float
    kl: float
    total: float


@dataclass
class VaeModel:
    """Encoder emits ``mu || log_var`` (2d units); decoder maps z to logits
    (bernoulli) or the mean f(z) (gaussian, observation noise ``sigma``).

    ``prior_scale`` is the standard deviation of the latent prior N(0, s^2 I);
    it is 1 except after :func:`lambda_absorb_transform`.
    """

    encoder: Mlp
    decoder: Mlp
    latent_dim: int
    decoder_family: str = "bernoulli"
    sigma: float = 1.0
    prior_scale: float = 1.0

    def __post_init__(self):
        if self.decoder_family not in FAMILIES:
            raise ValueError(f"decoder_family must be one of {FAMILIES}")
        if self.decoder_family == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian decoder needs sigma > 0")
        if self.encoder.dims[-1] != 2 * self.latent_dim:
            raise ad.ShapeError(
                f"encoder emits {self.encoder.dims[-1]} units, need {2 * self.latent_dim}")
        if self.decoder.dims[0] != self.latent_dim + self.cond_dim:
            raise ad.ShapeError(
                f"decoder takes {self.decoder.dims[0]} inputs, need {self.latent_dim + self.cond_dim}")

    @property
    def cond_dim(self) -> int:
        return 0

    @property
    def data_dim(self) -> int:
        return self.decoder.dims[-1]

    def parameters(self) -> list:
        return self.encoder.parameters() + self.decoder.parameters()


def _x(a) -> Tensor:
    return a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))


def _check_unit_interval(x: np.ndarray):
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("bernoulli decoder needs targets in [0, 1]")


def encode(model: VaeModel, x, cond=None) -> GaussianPosterior:
    x = _x(x)
    if cond is not None:
        x = ad.concat([x, _x(cond)], axis=1)
    h = forward(model.encoder, x)
    d = model.latent_dim
    shift = 2.0 * math.log(model.prior_scale)
    lo, hi = LOG_VAR_BOUNDS
    log_var = ad.clip(ad.columns(h, d, 2 * d), lo + shift, hi + shift)
    return GaussianPosterior(ad.columns(h, 0, d), log_var)


def reparameterize(q: GaussianPosterior, eps) -> Tensor:
    """z = mu + exp(log_var / 2) * eps."""
    eps = _x(eps)
    if eps.shape != q.mu.shape:
        raise ad.ShapeError(f"eps {eps.shape} does not match posterior {q.mu.shape}")
    return ad.add(q.mu, ad.mul(ad.exp(ad.scale(q.log_var, 0.5)), eps))


def kl_gaussian(q: GaussianPosterior, prior_scale: float = 1.0) -> Tensor:
    """Per-row D[N(mu, diag(exp(log_var))) || N(0, s^2 I)] in nats."""
    s2 = float(prior_scale) ** 2
    inner = ad.add(ad.scale(ad.exp(q.log_var), 1.0 / s2), ad.scale(ad.square(q.mu), 1.0 / s2))
    inner = ad.sub(ad.sub(inner, 1.0), q.log_var)
    if prior_scale != 1.0:
        inner = ad.add(inner, math.log(s2))
    return ad.scale(ad.reduce_sum(inner, axis=1), 0.5)


def kl_gaussian_std(q: GaussianPosterior) -> Tensor:
    """Per-row 1/2 sum_j (exp(log_var_j) + mu_j^2 - 1 - log_var_j)."""
    return kl_gaussian(q, 1.0)


def decode(model: VaeModel, z, cond=None) -> Tensor:
    """Raw decoder output: logits (bernoulli) or the mean f(z) (gaussian)."""
    z = _x(z)
    if cond is not None:
        z = ad.concat([z, _x(cond)], axis=1)
    return forward(model.decoder, z)


def _recon_from_output(model: VaeModel, x, out: Tensor, full: bool) -> Tensor:
    x = _x(x)
    if x.shape != out.shape:
        raise ad.ShapeError(f"target {x.shape} vs decoder output {out.shape}")
    if model.decoder_family == "bernoulli":
        _check_unit_interval(x.data)
        return ad.neg(ad.reduce_sum(ad.sigmoid_cross_entropy(out, x), axis=1))
    ll = ad.scale(ad.reduce_sum(ad.square(ad.sub(x, out)), axis=1), -0.5 / model.sigma ** 2)
    if full:
        ll = ad.add(ll, -0.5 * out.shape[1] * math.log(2 * math.pi * model.sigma ** 2))
    return ll


def recon_log_likelihood(model: VaeModel, x, z, cond=None, full: bool = False) -> Tensor:
    """Per-row log P(x|z) in nats.

    The gaussian family drops its normalizing constant unless ``full`` is set;
    the bernoulli family accepts real-valued targets in [0, 1] (expected
    log-probability of a stochastically binarized x).
    """
    return _recon_from_output(model, x, decode(model, z, cond), full)


def elbo_rows(model: VaeModel, x, eps, cond=None):
    """Per-row (recon, kl) for one reparameterized draw per row."""
    q = encode(model, x, cond)
    z = reparameterize(q, eps)
    recon = recon_log_likelihood(model, x, z, cond)
    return recon, kl_gaussian(q, model.prior_scale)


def objective(model: VaeModel, x, eps, cond=None) -> tuple:
    """Batch-mean ELBO tensor plus the per-row recon and kl tensors."""
    recon, kl = elbo_rows(model, x, eps, cond)
    return ad.reduce_mean(ad.sub(recon, kl)), recon, kl


def _terms(recon: Tensor, kl: Tensor) -> ElboTerms:
    r, k = float(recon.data.mean()), float(kl.data.mean())
    return ElboTerms(recon=r, kl=k, total=r - k)


def _diagnostics(x: np.ndarray, recon: Tensor, kl: Tensor) -> str:
    return (f"batch of {x.shape[0]} rows, x in [{x.min():.3g}, {x.max():.3g}], "
            f"non-finite recon rows {int((~np.isfinite(recon.data)).sum())}, "
            f"non-finite kl rows {int((~np.isfinite(kl.data)).sum())}")


def step_on(model: VaeModel, x: np.ndarray, eps: np.ndarray, state: AdamState,
            cond: Optional[np.ndarray] = None) -> ElboTerms:
    params = model.parameters()
    tape = Tape()
    with tape:
        for p in params:
            tape.watch(p)
        total, recon, kl = objective(model, x, eps, cond)
        loss = ad.neg(total)
    if not np.isfinite(loss.data):
        raise NonFiniteError("non-finite loss: " + _diagnostics(x, recon, kl))
    grads = ad.backward(loss, tape)
    adam_step(params, [np.asarray(grads.get(p.node_id, np.zeros_like(p.data))) for p in params],
              state)
    return _terms(recon, kl)


def train_step(model: VaeModel, batch, state: AdamState, rng: np.random.Generator,
               eps=None) -> ElboTerms:
    """One ADAM step on -mean(recon - kl), one eps draw per datapoint.

    Returns the terms evaluated before the update.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    if eps is None:
        eps = rng.standard_normal((x.shape[0], model.latent_dim))
    return step_on(model, x, eps, state)


def sample(model: VaeModel, n: int, rng: np.random.Generator, cond=None) -> np.ndarray:
    """Decode prior draws z ~ N(0, s^2 I); the encoder is not touched."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = model.prior_scale * rng.standard_normal((n, model.latent_dim))
    return decoder_mean(model, z, cond)


def decoder_mean(model: VaeModel, z, cond=None) -> np.ndarray:
    out = decode(model, z, cond).data
    if model.decoder_family == "bernoulli":
        return ad._sigmoid(np.atleast_1d(out)).reshape(out.shape)
    return out


def elbo_estimate(model: VaeModel, x, n_samples: int, rng: np.random.Generator, cond=None,
                  full: bool = False):
    """Per-example ELBO averaged over ``n_samples`` eps draws.

    Returns ``(estimate, standard_error)``, each of shape (batch,). The SE is
    nan when ``n_samples == 1``. ``full`` keeps the gaussian normalizing
    constant so the result bounds the true log-density.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    eps = rng.standard_normal((n_samples, x.shape[0], model.latent_dim))
    q = encode(model, x, cond)
    kl = kl_gaussian(q, model.prior_scale).data
    vals = np.empty((n_samples, x.shape[0]))
    for i in range(n_samples):
        z = reparameterize(q, eps[i])
        vals[i] = recon_log_likelihood(model, x, z, cond, full=full).data - kl
    est = vals.mean(axis=0)
    if n_samples == 1:
        return est, np.full_like(est, np.nan)
    return est, vals.std(axis=0, ddof=1) / math.sqrt(n_samples)


def _pairwise_loglik(model: VaeModel, x: np.ndarray, out: np.ndarray) -> np.ndarray:
    """log P(x_i | z_j) for every row i and decoder output j, full densities."""
    if model.decoder_family == "bernoulli":
        _check_unit_interval(x)
        log_s = -np.logaddexp(0.0, -out)
        log_1ms = -np.logaddexp(0.0, out)
        return x @ log_s.T + (1.0 - x) @ log_1ms.T
    sq = (x * x).sum(1)[:, None] - 2.0 * x @ out.T + (out * out).sum(1)[None, :]
    sig2 = model.sigma ** 2
    return -0.5 * np.maximum(sq, 0.0) / sig2 - 0.5 * x.shape[1] * math.log(2 * math.pi * sig2)


def naive_likelihood_estimate(model: VaeModel, x, n: int, rng: np.random.Generator,
                              chunk: int = 4096):
    """log of (1/n) sum_i P(x | z_i) with z_i drawn from the prior.

    Returns ``(log_estimate, standard_error)`` per example; the SE is the
    delta-method error of the log of the sample mean (nan when n == 1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = model.prior_scale * rng.standard_normal((n, model.latent_dim))
    logw = np.concatenate(
        [_pairwise_loglik(model, x, decode(model, z[i:i + chunk]).data)
         for i in range(0, n, chunk)], axis=1)
    est = logsumexp(logw, axis=1) - math.log(n)
    if n == 1:
        return est, np.full_like(est, np.nan)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    se = w.std(axis=1, ddof=1) / (math.sqrt(n) * w.mean(axis=1))
    return est, se


def reconstruction_cross_entropy(model: VaeModel, x) -> float:
    """Mean per-pixel sigmoid cross-entropy of decode(mu(x)) against x."""
    x = np.asarray(x, dtype=np.float64)
    q = encode(model, x)
    logits = decode(model, q.mu)
    return float(ad.sigmoid_cross_entropy(logits, x).data.mean())


def lambda_absorb_transform(model: VaeModel, lam: float) -> VaeModel:
    """Rescale the latent space by ``lam`` without changing the objective.

    f'(z') = f(z'/lam), mu' = lam * mu, Sigma' = lam^2 * Sigma, prior
    N(0, lam^2 I). The returned model shares no arrays with the input.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if model.encoder.layers[-1].activation != "identity":
        raise ValueError("last encoder layer must be affine (identity activation)")
    d = model.latent_dim
    enc, dec = model.encoder.copy(), model.decoder.copy()
    last = enc.layers[-1]
    last.weight.data[:, :d] *= lam
    last.bias.data[:d] *= lam
    last.bias.data[d:] += 2.0 * math.log(lam)
    first = dec.layers[0]
    first.weight.data[:d] /= lam
    return replace(model, encoder=enc, decoder=dec, prior_scale=model.prior_scale * lam)


def zero_mlp_like(net: Mlp) -> Mlp:
    """Same architecture with every weight and bias set to zero."""
    return Mlp([DenseLayer(Tensor(np.zeros_like(l.weight.data), requires_grad=True),
                           Tensor(np.zeros_like(l.bias.data), requires_grad=True),
                           l.activation) for l in net.layers])
