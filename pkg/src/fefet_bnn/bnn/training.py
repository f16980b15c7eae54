"""Optimisation loops: Bayes-by-Backprop with a device prior, and plain baselines."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..mapping import MappingConfig, weight_sigma
from ..variation import VariationFit, average_sigma
from .layers import (
    PARAM_NAMES,
    LossBreakdown,
    VariationalNetwork,
    activate,
    activate_grad,
    cross_entropy,
    loss_and_grads,
    plain_forward,
)

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when the loss or a parameter becomes non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    kl_weight: float = 0.1
    kl_direction: str = "prior_posterior"
    # "dataset": KL / n_train; "batches": KL / n_batches; "none": raw sum
    kl_normalization: str = "dataset"
    mc_samples: int = 1
    prior_update: str = "iteration"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.kl_weight <= 1:
            raise ValueError("kl_weight must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.kl_normalization not in ("dataset", "batches", "none"):
            raise ValueError(f"unknown kl_normalization {self.kl_normalization!r}")
        if self.prior_update not in ("iteration", "epoch"):
            raise ValueError(f"unknown prior_update {self.prior_update!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def kl_scale(self, n_train: int) -> float:
        if self.kl_normalization == "dataset":
            return 1.0 / n_train
        if self.kl_normalization == "batches":
            return 1.0 / math.ceil(n_train / self.batch_size)
        return 1.0


class Adam:
    """Adam over a list of per-layer parameter dicts (updated in place)."""

    def __init__(self, params: Sequence[dict], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.t = 0

    def step(self, params: Sequence[dict], grads: Sequence[dict], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k in p:
                m[k] *= b1
                m[k] += (1 - b1) * g[k]
                v[k] *= b2
                v[k] += (1 - b2) * g[k] * g[k]
                p[k] -= (lr / c1) * m[k] / (np.sqrt(v[k] / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        self.m = state["m"]
        self.v = state["v"]


# ---------------------------------------------------------------------------
# priors


def layer_scale(mu_w: np.ndarray, mu_b: np.ndarray) -> float:
    """Per-layer max-abs normalisation constant mapping weights into [-1, 1]."""
    s = float(max(np.abs(mu_w).max(initial=0.0), np.abs(mu_b).max(initial=0.0)))
    return s if s > 0 else 1.0


def device_weight_sigma(w, scale: float, cfg: MappingConfig, fit: VariationFit):
    """Spread of raw weights ``w`` under the device model, after max-abs normalisation."""
    return weight_sigma(np.abs(w) / scale, cfg, fit) * scale


def _per_layer(fits, n_layers):
    if fits is None:
        raise ValueError("a variation fit is required for the device prior")
    if isinstance(fits, VariationFit):
        return [fits] * n_layers
    fits = list(fits)
    if len(fits) != n_layers or any(f is None for f in fits):
        raise ValueError(f"expected {n_layers} per-layer fits")
    return fits


def update_prior(net: VariationalNetwork, fits, cfg: Optional[MappingConfig] = None):
    """Set each prior mean to the current posterior mean and its spread from the device model."""
    fits = _per_layer(fits, len(net.layers))
    for layer, fit in zip(net.layers, fits):
        c = cfg if cfg is not None else MappingConfig.from_fit(fit)
        s = layer_scale(layer.mu_w, layer.mu_b)
        layer.set_prior(layer.mu_w, device_weight_sigma(layer.mu_w, s, c, fit),
                        layer.mu_b, device_weight_sigma(layer.mu_b, s, c, fit))


def fixed_sigma_from_fit(fit: VariationFit, cfg: Optional[MappingConfig] = None) -> float:
    """Average conductance spread pulled back to normalised weight units."""
    c = cfg if cfg is not None else MappingConfig.from_fit(fit)
    return average_sigma(fit) / c.slope


def update_prior_fixed(net: VariationalNetwork, sigma_f: float):
    """Prior mean tracks the posterior; spread is ``sigma_f`` (normalised units) for every weight."""
    if sigma_f <= 0:
        raise ValueError("sigma_f must be positive")
    for layer in net.layers:
        s = layer_scale(layer.mu_w, layer.mu_b)
        layer.set_prior(layer.mu_w, sigma_f * s, layer.mu_b, sigma_f * s)


# ---------------------------------------------------------------------------
# loops


@dataclass
class EpochRecord:
    epoch: int
    likelihood: float
    kl: float
    total: float
    train_acc: float
    test_acc: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _check_finite(value, epoch, step, what="loss"):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")


def train_variational(
    net: VariationalNetwork,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    prior_fn: Callable[[VariationalNetwork], None],
    eval_fn: Optional[Callable[[VariationalNetwork], float]] = None,
    optimizer: Optional[Adam] = None,
    start_epoch: int = 0,
) -> list[EpochRecord]:
    """Bayes-by-Backprop loop.

    Each step: refresh the prior via ``prior_fn``, sample pre-activations with
    local reparameterisation, add the weighted KL, back-propagate, Adam step.
    """
    n = X.shape[0]
    shuffle_rng, noise_rng = _streams(cfg.seed, 2)
    params = [layer.params() for layer in net.layers]
    opt = optimizer or Adam(params)
    kl_scale = cfg.kl_scale(n)
    history = []
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        if cfg.prior_update == "epoch":
            prior_fn(net)
        sums = np.zeros(3)
        correct = 0
        n_steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            if cfg.prior_update == "iteration":
                prior_fn(net)
            total_grads = None
            for _ in range(cfg.mc_samples):
                br, grads, logits = loss_and_grads(net, xb, yb, cfg.kl_weight, kl_scale,
                                                   rng=noise_rng, direction=cfg.kl_direction)
                _check_finite(br.total, epoch, step)
                correct += int(np.sum(np.argmax(logits, axis=1) == yb))
                sums += (br.likelihood, br.kl, br.total)
                n_steps += 1
                if total_grads is None:
                    total_grads = grads
                else:
                    for tg, g in zip(total_grads, grads):
                        for k in tg:
                            tg[k] += g[k]
            if cfg.mc_samples > 1:
                for tg in total_grads:
                    for k in tg:
                        tg[k] /= cfg.mc_samples
            opt.step(params, total_grads, lr)
        sums /= max(n_steps, 1)
        rec = EpochRecord(epoch, *sums.tolist(), train_acc=correct / (n * cfg.mc_samples))
        if eval_fn is not None:
            rec.test_acc = float(eval_fn(net))
        history.append(rec)
        logger.info("epoch %d lik %.4f kl %.2f acc %.4f test %.4f", epoch, rec.likelihood, rec.kl,
                    rec.train_acc, rec.test_acc)
    net._optimizer = opt
    return history


def init_plain_weights(widths: Sequence[int], rng, dtype=np.float64) -> list[list[np.ndarray]]:
    out = []
    for a, b in zip(widths, widths[1:]):
        bound = 1.0 / np.sqrt(a)
        out.append([rng.uniform(-bound, bound, (b, a)).astype(dtype), rng.uniform(-bound, bound, b).astype(dtype)])
    return out


def plain_loss_and_grads(weights, X, y, activation="relu"):
    """Cross-entropy and reverse-mode gradients for a plain MLP."""
    hs = [X]
    zs = []
    h = X
    for i, (W, b) in enumerate(weights):
        z = h @ W.T + b
        zs.append(z)
        h = activate(z, activation) if i < len(weights) - 1 else z
        hs.append(h)
    loss, g = cross_entropy(h, y)
    grads = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        if i < len(weights) - 1:
            g = g * activate_grad(zs[i], hs[i + 1], activation)
        W, _ = weights[i]
        grads[i] = {"W": g.T @ hs[i], "b": g.sum(axis=0)}
        if i > 0:
            g = g @ W
    return loss, grads, h


def train_plain(
    weights: list[list[np.ndarray]],
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    noise_std: float = 0.0,
    activation: str = "relu",
    eval_fn: Optional[Callable] = None,
) -> list[EpochRecord]:
    """Deterministic training, optionally under multiplicative weight noise.

    With ``noise_std > 0`` every forward pass uses ``w * (1 + delta)``,
    ``delta ~ N(0, noise_std)``, and the gradient at the perturbed point is
    applied to the clean weights unchanged.
    """
    n = X.shape[0]
    shuffle_rng, noise_rng = _streams(cfg.seed, 2)
    params = [{"W": W, "b": b} for W, b in weights]
    opt = Adam(params)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        loss_sum, correct, n_steps = 0.0, 0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if noise_std > 0:
                used = [(p["W"] * (1 + noise_std * noise_rng.standard_normal(p["W"].shape).astype(p["W"].dtype)),
                         p["b"] * (1 + noise_std * noise_rng.standard_normal(p["b"].shape).astype(p["b"].dtype)))
                        for p in params]
            else:
                used = [(p["W"], p["b"]) for p in params]
            loss, grads, logits = plain_loss_and_grads(used, X[idx], y[idx], activation)
            _check_finite(loss, epoch, step)
            loss_sum += loss
            n_steps += 1
            correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
            opt.step(params, grads, lr)
        rec = EpochRecord(epoch, loss_sum / max(n_steps, 1), 0.0, loss_sum / max(n_steps, 1), correct / n)
        if eval_fn is not None:
            rec.test_acc = float(eval_fn([(p["W"], p["b"]) for p in params]))
        history.append(rec)
    return history
