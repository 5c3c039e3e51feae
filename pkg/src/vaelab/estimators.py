"""scikit-learn style wrappers around the functional VAE/CVAE core."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from . import cvae as cv
from . import vae as vf
from .data import batches, stochastic_binarize
from .nn import AdamState, init_mlp


def _check_unit(X, what="X"):
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(f"{what} must lie in [0, 1] for a bernoulli decoder")
    return X


def _seeds(random_state, n):
    """Independent child seeds for init, batching and noise."""
    root = check_random_state(random_state).randint(np.iinfo(np.int32).max) \
        if not isinstance(random_state, (int, np.integer)) else int(random_state)
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root).spawn(n)]


def _epoch_batches(n_rows, batch_size, seed):
    epoch = 0
    while True:
        yield from batches(n_rows, batch_size, seed, epoch)
        epoch += 1


class _LatentBase(BaseEstimator):
    def _validate_common(self):
        if int(self.latent_dim) < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.decoder not in vf.FAMILIES:
            raise ValueError(f"decoder must be one of {vf.FAMILIES}")
        if self.decoder == "gaussian" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if int(self.batch_size) < 1 or int(self.n_steps) < 0:
            raise ValueError("batch_size must be >= 1 and n_steps >= 0")

    def _present(self, X, rng):
        return stochastic_binarize(X, rng) if self.binarize else X

    def _target_check(self, Y):
        return _check_unit(Y, "targets") if self.decoder == "bernoulli" else Y


class VariationalAutoencoder(TransformerMixin, _LatentBase):
    """Gaussian-latent autoencoder trained on the evidence lower bound.

    Parameters
    ----------
    latent_dim : int, default=20
    hidden_layer_sizes : tuple of int, default=(400,)
        Widths of the ReLU layers in both encoder and decoder (mirrored).
    decoder : {'bernoulli', 'gaussian'}, default='bernoulli'
    sigma : float, default=1.0
        Observation noise of the gaussian decoder; ignored for bernoulli.
    learning_rate : float, default=1e-3
    batch_size : int, default=128
    n_steps : int, default=5000
        Number of ADAM updates.
    binarize : bool, default=False
        Resample a Bernoulli binarization of each batch every time it is used.
    random_state : int, RandomState or None

    Attributes
    ----------
    model_ : VaeModel
    optimizer_ : AdamState
    history_ : list of ElboTerms, one per step
    """

    def __init__(self, latent_dim=20, hidden_layer_sizes=(400,), decoder="bernoulli",
                 sigma=1.0, learning_rate=1e-3, batch_size=128, n_steps=5000,
                 binarize=False, random_state=None):
        self.latent_dim = latent_dim
        self.hidden_layer_sizes = hidden_layer_sizes
        self.decoder = decoder
        self.sigma = sigma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.binarize = binarize
        self.random_state = random_state

    def _build(self, n_features, seeds):
        hidden = list(self.hidden_layer_sizes)
        d = int(self.latent_dim)
        enc = init_mlp([n_features] + hidden + [2 * d], seed=seeds[0])
        dec = init_mlp([d] + hidden[::-1] + [n_features], seed=seeds[1])
        return vf.VaeModel(enc, dec, d, self.decoder, float(self.sigma))

    def fit(self, X, y=None, callback=None):
        """Train for ``n_steps`` minibatch steps.

        ``callback(step, terms)`` is called after every step.
        """
        self._validate_common()
        X = self._target_check(check_array(X, dtype=np.float64))
        seeds = _seeds(self.random_state, 4)
        self.model_ = self._build(X.shape[1], seeds)
        self.optimizer_ = AdamState(lr=float(self.learning_rate))
        self.n_features_in_ = X.shape[1]
        self.history_ = []
        rng = np.random.default_rng(seeds[3])
        order = _epoch_batches(X.shape[0], int(self.batch_size), seeds[2])
        for step in range(int(self.n_steps)):
            xb = self._present(X[next(order)], rng)
            terms = vf.train_step(self.model_, xb, self.optimizer_, rng)
            self.history_.append(terms)
            if callback is not None:
                callback(step, terms)
        return self

    def _checked(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Posterior means mu(X)."""
        X = self._checked(X)
        return vf.encode(self.model_, X).mu.data

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return vf.decoder_mean(self.model_, check_array(Z, dtype=np.float64))

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "model_")
        return vf.sample(self.model_, int(n_samples), np.random.default_rng(random_state))

    def score_samples(self, X, n_samples=1, random_state=None):
        """Per-example ELBO in nats (a lower bound on log P(x))."""
        X = self._target_check(self._checked(X))
        est, _ = vf.elbo_estimate(self.model_, X, int(n_samples), np.random.default_rng(random_state))
        return est

    def score(self, X, y=None, n_samples=1, random_state=0):
        return float(np.mean(self.score_samples(X, n_samples, random_state)))


class ConditionalVAE(_LatentBase):
    """Models P(Y | X) through a latent code; ``fit(X, Y)`` with X the condition.

    Shares the hyperparameters of :class:`VariationalAutoencoder`;
    ``binarize`` applies to the condition X, resampled per presentation.
    """

    def __init__(self, latent_dim=20, hidden_layer_sizes=(400,), decoder="bernoulli",
                 sigma=1.0, learning_rate=1e-3, batch_size=128, n_steps=5000,
                 binarize=False, random_state=None):
        self.latent_dim = latent_dim
        self.hidden_layer_sizes = hidden_layer_sizes
        self.decoder = decoder
        self.sigma = sigma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.binarize = binarize
        self.random_state = random_state

    def fit(self, X, Y, callback=None):
        self._validate_common()
        X = check_array(X, dtype=np.float64, ensure_min_features=0)
        Y = self._target_check(check_array(Y, dtype=np.float64))
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
        seeds = _seeds(self.random_state, 4)
        hidden = list(self.hidden_layer_sizes)
        d, nx, ny = int(self.latent_dim), X.shape[1], Y.shape[1]
        self.model_ = cv.CvaeModel(init_mlp([ny + nx] + hidden + [2 * d], seed=seeds[0]),
                                   init_mlp([d + nx] + hidden[::-1] + [ny], seed=seeds[1]),
                                   d, self.decoder, float(self.sigma), condition_dim=nx)
        self.optimizer_ = AdamState(lr=float(self.learning_rate))
        self.n_features_in_ = nx
        self.history_ = []
        rng = np.random.default_rng(seeds[3])
        order = _epoch_batches(X.shape[0], int(self.batch_size), seeds[2])
        for step in range(int(self.n_steps)):
            idx = next(order)
            terms = cv.cvae_train_step(self.model_, self._present(X[idx], rng), Y[idx],
                                       self.optimizer_, rng)
            self.history_.append(terms)
            if callback is not None:
                callback(step, terms)
        return self

    def _cond(self, X, random_state=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def sample(self, X, n_candidates=1, random_state=None):
        """Decoded candidates, shape (n_rows, n_candidates, |Y|).

        Binarized conditioning uses the same ``random_state`` stream.
        """
        rng = np.random.default_rng(random_state)
        X = self._present(self._cond(X), rng)
        return cv.cvae_sample(self.model_, X, int(n_candidates), rng)

    def predict(self, X, random_state=None):
        """One decoded sample per row."""
        return self.sample(X, 1, random_state)[:, 0, :]

    def score_samples(self, X, Y, n_samples=1, random_state=None):
        X = self._cond(X)
        Y = self._target_check(check_array(Y, dtype=np.float64))
        est, _ = vf.elbo_estimate(self.model_, Y, int(n_samples),
                                  np.random.default_rng(random_state), cond=X)
        return est


class RegressorBaseline(RegressorMixin, BaseEstimator):
    """Deterministic X -> Y network with the CVAE's layer widths.

    ``loss='bernoulli'`` trains sigmoid outputs with cross-entropy,
    ``'gaussian'`` trains linear outputs with squared error.
    """

    def __init__(self, hidden_layer_sizes=(400,), loss="gaussian", learning_rate=1e-3,
                 batch_size=128, n_steps=5000, binarize=False, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.loss = loss
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.binarize = binarize
        self.random_state = random_state

    def fit(self, X, Y, callback=None):
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64, ensure_2d=False)
        self.y_1d_ = Y.ndim == 1
        Y = Y.reshape(len(Y), -1)
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
        if self.loss == "bernoulli":
            _check_unit(Y, "Y")
        seeds = _seeds(self.random_state, 4)
        hidden = list(self.hidden_layer_sizes)
        self.model_ = cv.RegressorModel(
            init_mlp([X.shape[1]] + hidden + [Y.shape[1]], seed=seeds[0]), self.loss)
        self.optimizer_ = AdamState(lr=float(self.learning_rate))
        self.n_features_in_ = X.shape[1]
        self.history_ = []
        rng = np.random.default_rng(seeds[3])
        order = _epoch_batches(X.shape[0], int(self.batch_size), seeds[2])
        for step in range(int(self.n_steps)):
            idx = next(order)
            xb = stochastic_binarize(X[idx], rng) if self.binarize else X[idx]
            loss = cv.regressor_train_step(self.model_, xb, Y[idx], self.optimizer_)
            self.history_.append(loss)
            if callback is not None:
                callback(step, loss)
        return self

    def predict(self, X, random_state=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if self.binarize:
            X = stochastic_binarize(X, np.random.default_rng(random_state))
        out = cv.regressor_predict(self.model_, X)
        return out[:, 0] if self.y_1d_ else out
