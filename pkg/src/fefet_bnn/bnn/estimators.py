"""scikit-learn compatible classifiers built on the variational and plain MLPs."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..mapping import MappingConfig
from ..variation import VariationFit
from .layers import VariationalNetwork, mean_weights, plain_forward, softmax
from .training import (
    TrainConfig,
    fixed_sigma_from_fit,
    init_plain_weights,
    train_plain,
    train_variational,
    update_prior,
    update_prior_fixed,
)

PRIORS = ("device", "fixed")


def _accuracy(weights, X, y, activation):
    return float(np.mean(np.argmax(plain_forward(weights, X, activation), axis=1) == y))


class _MLPBase(ClassifierMixin, BaseEstimator):
    def _widths(self, n_features, n_classes):
        return [n_features, *self.hidden_layer_sizes, n_classes]

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            lr_decay_every=self.lr_decay_every, lr_decay_factor=self.lr_decay_factor,
            kl_weight=getattr(self, "kl_weight", 0.0),
            kl_direction=getattr(self, "kl_direction", "prior_posterior"),
            kl_normalization=getattr(self, "kl_normalization", "dataset"),
            mc_samples=getattr(self, "mc_samples", 1),
            prior_update=getattr(self, "prior_update", "iteration"),
            seed=self.random_state,
        )

    def _prepare(self, X, y):
        X, y = check_X_y(X, y, dtype=[np.float64, np.float32])
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        self.n_features_in_ = X.shape[1]
        return X.astype(self.dtype, copy=False), self._le.transform(y)

    def _eval_fn(self, X_val, y_val):
        if X_val is None:
            return None
        Xv = check_array(X_val).astype(self.dtype, copy=False)
        yv = self._le.transform(y_val)
        return lambda weights: _accuracy(weights, Xv, yv, self.activation)

    def decision_function(self, X):
        check_is_fitted(self, "classes_")
        X = check_array(X).astype(self.dtype, copy=False)
        return plain_forward(self.mean_weights(), X, self.activation)

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        # argmax breaks ties toward the lowest class index
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class BayesianMLPClassifier(_MLPBase):
    """Dense Bayes-by-Backprop classifier whose prior encodes device variation.

    With ``prior="device"`` every prior mean follows its posterior mean and
    the prior spread comes from ``variation_fit`` mapped through ``mapping``.
    With ``prior="fixed"`` every prior spread is ``sigma_f`` (normalised
    weight units), defaulting to the fit's average spread.

    Predictions use the posterior means only.
    """

    def __init__(self, hidden_layer_sizes=(512, 256, 128, 64), activation="relu", prior="device",
                 variation_fit: Optional[VariationFit] = None, mapping: Optional[MappingConfig] = None,
                 sigma_f: Optional[float] = None, kl_weight=0.1, kl_direction="prior_posterior",
                 kl_normalization="dataset", batch_size=128, learning_rate=1e-3, lr_decay_every=10,
                 lr_decay_factor=0.5, epochs=30, mc_samples=1, sigma_init=0.05, prior_update="iteration",
                 dtype="float32", random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.prior = prior
        self.variation_fit = variation_fit
        self.mapping = mapping
        self.sigma_f = sigma_f
        self.kl_weight = kl_weight
        self.kl_direction = kl_direction
        self.kl_normalization = kl_normalization
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_every = lr_decay_every
        self.lr_decay_factor = lr_decay_factor
        self.epochs = epochs
        self.mc_samples = mc_samples
        self.sigma_init = sigma_init
        self.prior_update = prior_update
        self.dtype = dtype
        self.random_state = random_state

    def _prior_fn(self):
        if self.prior == "device":
            if self.variation_fit is None:
                raise ValueError("prior='device' needs a variation_fit")
            return lambda net: update_prior(net, self.variation_fit, self.mapping)
        if self.prior == "fixed":
            sigma_f = self.sigma_f
            if sigma_f is None:
                if self.variation_fit is None:
                    raise ValueError("prior='fixed' needs sigma_f or a variation_fit")
                sigma_f = fixed_sigma_from_fit(self.variation_fit, self.mapping)
            self.sigma_f_ = float(sigma_f)
            return lambda net: update_prior_fixed(net, sigma_f)
        raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")

    def fit(self, X, y, X_val=None, y_val=None, scorer=None):
        """Train from scratch.

        ``scorer(weights) -> float``, if given, replaces the per-epoch
        validation accuracy recorded in ``history_[i].test_acc``.
        """
        prior_fn = self._prior_fn()
        X, yi = self._prepare(X, y)
        cfg = self._train_config()
        init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.network_ = VariationalNetwork.initialize(
            self._widths(X.shape[1], len(self.classes_)), init_rng, self.activation, self.sigma_init, self.dtype)
        self.history_ = train_variational(self.network_, X, yi, cfg, prior_fn,
                                          self._wrap_eval(X_val, y_val, scorer))
        self.epochs_trained_ = cfg.epochs
        return self

    def continue_fit(self, X, y, epochs: int, learning_rate: Optional[float] = None, X_val=None, y_val=None):
        """Run more epochs from the current state, reusing the optimiser moments."""
        check_is_fitted(self, "network_")
        X = check_array(X).astype(self.dtype, copy=False)
        yi = self._le.transform(y)
        cfg = self._train_config()
        cfg.epochs = epochs
        if learning_rate is not None:
            cfg.learning_rate = learning_rate
            cfg.lr_decay_every = 0
        cfg.seed = [self.random_state, self.epochs_trained_]
        opt = getattr(self.network_, "_optimizer", None)
        hist = train_variational(self.network_, X, yi, cfg, self._prior_fn(), self._wrap_eval(X_val, y_val),
                                 optimizer=opt, start_epoch=self.epochs_trained_)
        self.history_.extend(hist)
        self.epochs_trained_ += epochs
        return self

    def _wrap_eval(self, X_val, y_val, scorer=None):
        fn = scorer if scorer is not None else self._eval_fn(X_val, y_val)
        if fn is None:
            return None
        return lambda net: fn(mean_weights(net))

    def mean_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        check_is_fitted(self, "network_")
        return mean_weights(self.network_)

    snapshot_mean_network = mean_weights


class NoisyMLPClassifier(_MLPBase):
    """Plain dense classifier trained under multiplicative Gaussian weight noise.

    ``noise_std=0`` gives ordinary deterministic training.
    """

    def __init__(self, hidden_layer_sizes=(512, 256, 128, 64), activation="relu", noise_std=0.0,
                 batch_size=128, learning_rate=1e-3, lr_decay_every=10, lr_decay_factor=0.5, epochs=30,
                 dtype="float32", random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.noise_std = noise_std
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_every = lr_decay_every
        self.lr_decay_factor = lr_decay_factor
        self.epochs = epochs
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        X, yi = self._prepare(X, y)
        cfg = self._train_config()
        init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.weights_ = init_plain_weights(self._widths(X.shape[1], len(self.classes_)), init_rng, self.dtype)
        self.history_ = train_plain(self.weights_, X, yi, cfg, self.noise_std, self.activation,
                                    self._eval_fn(X_val, y_val))
        return self

    def mean_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        check_is_fitted(self, "weights_")
        return [(W.copy(), b.copy()) for W, b in self.weights_]
