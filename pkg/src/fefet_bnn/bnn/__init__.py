"""Variational dense networks trained with Bayes by Backprop."""
from .estimators import BayesianMLPClassifier, NoisyMLPClassifier
from .layers import (
    LossBreakdown,
    VariationalDenseLayer,
    VariationalNetwork,
    backward_local_reparam,
    forward_local_reparam,
    kl_gaussian,
    kl_gaussian_terms,
    loss_and_grads,
    mean_weights,
    plain_forward,
)
from .training import (
    Adam,
    TrainConfig,
    TrainingDivergedError,
    fixed_sigma_from_fit,
    train_plain,
    train_variational,
    update_prior,
    update_prior_fixed,
)

__all__ = [
    "Adam", "BayesianMLPClassifier", "LossBreakdown", "NoisyMLPClassifier", "TrainConfig",
    "TrainingDivergedError", "VariationalDenseLayer", "VariationalNetwork", "backward_local_reparam",
    "fixed_sigma_from_fit", "forward_local_reparam", "kl_gaussian", "kl_gaussian_terms", "loss_and_grads", "mean_weights",
    "plain_forward", "train_plain", "train_variational", "update_prior", "update_prior_fixed",
]
