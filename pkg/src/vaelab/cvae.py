"""Conditional VAE for one-to-many prediction, and the plain regressor it is
compared against.

Conditioning is by concatenation: the encoder sees ``[Y, X]`` and the decoder
sees ``[z, X]``. The latent prior stays N(0, I) regardless of X.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .nn import AdamState, Mlp, NonFiniteError, adam_step, forward
from .vae import ElboTerms, VaeModel, decoder_mean, step_on


@dataclass
class CvaeModel(VaeModel):
    condition_dim: int = 0

    @property
    def cond_dim(self) -> int:
        return self.condition_dim

    def __post_init__(self):
        super().__post_init__()
        if self.encoder.dims[0] != self.data_dim + self.condition_dim:
            raise ad.ShapeError(
                f"encoder takes {self.encoder.dims[0]} inputs, need |Y|+|X| = "
                f"{self.data_dim + self.condition_dim}")


def _rows(x_cond, y_target):
    x = np.asarray(x_cond, dtype=np.float64)
    y = np.asarray(y_target, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(len(y), -1)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} condition rows but {y.shape[0]} target rows")
    if y.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    return x, y


def cvae_train_step(model: CvaeModel, x_cond, y_target, state: AdamState,
                    rng: np.random.Generator, eps=None) -> ElboTerms:
    """One ADAM step on E_q[log P(Y|z,X)] - D[Q(z|Y,X) || N(0,I)]."""
    x, y = _rows(x_cond, y_target)
    if eps is None:
        eps = rng.standard_normal((y.shape[0], model.latent_dim))
    return step_on(model, y, eps, state, cond=x)


def cvae_sample(model: CvaeModel, x_cond, k: int, rng: np.random.Generator) -> np.ndarray:
    """k prior draws per condition row, decoded. Shape (rows, k, |Y|)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.atleast_2d(np.asarray(x_cond, dtype=np.float64))
    n = x.shape[0]
    z = rng.standard_normal((n, k, model.latent_dim)).reshape(n * k, -1)
    out = decoder_mean(model, z, np.repeat(x, k, axis=0))
    return out.reshape(n, k, -1)


@dataclass
class RegressorModel:
    """Deterministic X -> Y network. ``loss`` is 'gaussian' (squared error)
    or 'bernoulli' (sigmoid cross-entropy on logits)."""

    net: Mlp
    loss: str = "gaussian"

    def __post_init__(self):
        if self.loss not in ("gaussian", "bernoulli"):
            raise ValueError("loss must be 'gaussian' or 'bernoulli'")

    def parameters(self) -> list:
        return self.net.parameters()


def regressor_loss(model: RegressorModel, x, y) -> ad.Tensor:
    out = forward(model.net, ad.Tensor(x))
    if model.loss == "bernoulli":
        per_row = ad.reduce_sum(ad.sigmoid_cross_entropy(out, y), axis=1)
    else:
        per_row = ad.reduce_sum(ad.square(ad.sub(out, ad.Tensor(y))), axis=1)
    return ad.reduce_mean(per_row)


def regressor_train_step(model: RegressorModel, x_cond, y_target, state: AdamState) -> float:
    x, y = _rows(x_cond, y_target)
    params = model.parameters()
    tape = Tape()
    with tape:
        for p in params:
            tape.watch(p)
        loss = regressor_loss(model, x, y)
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"non-finite regressor loss on a batch of {x.shape[0]} rows")
    grads = ad.backward(loss, tape)
    adam_step(params, [np.asarray(grads.get(p.node_id, np.zeros_like(p.data))) for p in params],
              state)
    return float(loss.data)


def regressor_predict(model: RegressorModel, x_cond) -> np.ndarray:
    out = forward(model.net, ad.Tensor(np.atleast_2d(np.asarray(x_cond, dtype=np.float64)))).data
    if model.loss == "bernoulli":
        return ad._sigmoid(np.atleast_1d(out)).reshape(out.shape)
    return out


def best_of_k_eval(candidates, truth) -> float:
    """min over candidate rows of ||c - truth||^2."""
    c = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if c.shape[0] == 0 or c.size == 0 and t.size:
        raise ValueError("empty candidate set")
    if c.shape[1] != t.size:
        raise ad.ShapeError(f"candidates have width {c.shape[1]}, truth {t.size}")
    return float(((c - t) ** 2).sum(axis=1).min())
