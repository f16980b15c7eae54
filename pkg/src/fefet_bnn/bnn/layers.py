"""Variational dense layers with a local-reparameterization forward pass.

Everything here is plain numpy with hand-written reverse-mode gradients.
A layer holds posterior means ``mu_w, mu_b`` and unconstrained spreads
``rho_w, rho_b`` with ``sigma = softplus(rho)``, plus a Gaussian prior
``(prior_mu, prior_sigma)`` per parameter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

PARAM_NAMES = ("mu_w", "rho_w", "mu_b", "rho_b")


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


@dataclass
class VariationalDenseLayer:
    mu_w: np.ndarray  # (out, in)
    rho_w: np.ndarray
    mu_b: np.ndarray  # (out,)
    rho_b: np.ndarray
    prior_mu_w: np.ndarray = None
    prior_sigma_w: np.ndarray = None
    prior_mu_b: np.ndarray = None
    prior_sigma_b: np.ndarray = None

    def __post_init__(self):
        if self.mu_w.shape != self.rho_w.shape or self.mu_b.shape != self.rho_b.shape:
            raise ValueError("mean and spread parameters must share shapes")
        if self.mu_b.shape != (self.mu_w.shape[0],):
            raise ValueError("bias length must equal the number of output units")
        if self.prior_mu_w is None:
            self.prior_mu_w = self.mu_w.copy()
            self.prior_mu_b = self.mu_b.copy()
            self.prior_sigma_w = self.sigma_w.copy()
            self.prior_sigma_b = self.sigma_b.copy()

    @classmethod
    def initialize(cls, n_in: int, n_out: int, rng: np.random.Generator,
                   sigma_init: float = 0.05, dtype=np.float64) -> "VariationalDenseLayer":
        bound = 1.0 / np.sqrt(n_in)
        rho = float(inverse_softplus(sigma_init))
        return cls(
            mu_w=rng.uniform(-bound, bound, (n_out, n_in)).astype(dtype),
            rho_w=np.full((n_out, n_in), rho, dtype=dtype),
            mu_b=rng.uniform(-bound, bound, n_out).astype(dtype),
            rho_b=np.full(n_out, rho, dtype=dtype),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu_w.shape

    @property
    def sigma_w(self) -> np.ndarray:
        return softplus(self.rho_w)

    @property
    def sigma_b(self) -> np.ndarray:
        return softplus(self.rho_b)

    def spreads(self):
        """``(sigma_w, sigma_b, dsigma_w/drho_w, dsigma_b/drho_b)`` computed once."""
        return softplus(self.rho_w), softplus(self.rho_b), expit(self.rho_w), expit(self.rho_b)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "VariationalDenseLayer":
        return VariationalDenseLayer(*(np.array(getattr(self, f)) for f in (
            "mu_w", "rho_w", "mu_b", "rho_b", "prior_mu_w", "prior_sigma_w", "prior_mu_b", "prior_sigma_b")))

    def set_prior(self, mu_w, sigma_w, mu_b, sigma_b):
        self.prior_mu_w = np.array(mu_w, dtype=self.mu_w.dtype)
        self.prior_sigma_w = np.array(np.broadcast_to(sigma_w, self.mu_w.shape), dtype=self.mu_w.dtype)
        self.prior_mu_b = np.array(mu_b, dtype=self.mu_b.dtype)
        self.prior_sigma_b = np.array(np.broadcast_to(sigma_b, self.mu_b.shape), dtype=self.mu_b.dtype)


# ---------------------------------------------------------------------------
# KL divergence


def kl_gaussian(mu_p, sigma_p, mu_q, sigma_q, direction: str = "prior_posterior") -> float:
    """Closed-form Gaussian KL summed over all entries.

    ``direction="prior_posterior"`` computes KL(p || q)::

        log(sq/sp) + sp**2 / (2 sq**2) + (mp - mq)**2 / (2 sq**2) - 1/2

    and ``"posterior_prior"`` computes the usual ELBO term KL(q || p).
    """
    return float(np.sum(kl_gaussian_terms(mu_p, sigma_p, mu_q, sigma_q, direction)))


def _check_sigmas(*sigmas):
    for s in sigmas:
        if np.any(np.asarray(s) <= 0):
            raise ValueError("standard deviations must be positive")


def kl_gaussian_terms(mu_p, sigma_p, mu_q, sigma_q, direction: str = "prior_posterior") -> np.ndarray:
    """Per-entry Gaussian KL, broadcast over the inputs."""
    _check_sigmas(sigma_p, sigma_q)
    mu_p, sigma_p, mu_q, sigma_q = (np.asarray(a) for a in (mu_p, sigma_p, mu_q, sigma_q))
    if direction == "prior_posterior":
        return np.log(sigma_q / sigma_p) + (sigma_p ** 2 + (mu_p - mu_q) ** 2) / (2 * sigma_q ** 2) - 0.5
    if direction == "posterior_prior":
        return np.log(sigma_p / sigma_q) + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sigma_p ** 2) - 0.5
    raise ValueError(f"unknown KL direction {direction!r}")


def kl_gaussian_grad(mu_p, sigma_p, mu_q, sigma_q, direction: str = "prior_posterior"):
    """Gradients of the per-entry KL with respect to ``mu_q`` and ``sigma_q``.

    The prior is treated as a constant.
    """
    d = mu_q - mu_p
    if direction == "prior_posterior":
        inv2 = 1.0 / sigma_q ** 2
        g_mu = d * inv2
        g_sigma = 1.0 / sigma_q - (sigma_p ** 2 + d ** 2) * inv2 / sigma_q
    elif direction == "posterior_prior":
        inv2 = 1.0 / sigma_p ** 2
        g_mu = d * inv2
        g_sigma = -1.0 / sigma_q + sigma_q * inv2
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return g_mu, g_sigma


def layer_kl(layer: VariationalDenseLayer, direction: str = "prior_posterior", spreads=None) -> float:
    sw, sb = (spreads or layer.spreads())[:2]
    return (kl_gaussian(layer.prior_mu_w, layer.prior_sigma_w, layer.mu_w, sw, direction)
            + kl_gaussian(layer.prior_mu_b, layer.prior_sigma_b, layer.mu_b, sb, direction))


def layer_kl_grads(layer: VariationalDenseLayer, direction: str = "prior_posterior",
                   spreads=None) -> dict[str, np.ndarray]:
    sw, sb, dw, db = spreads or layer.spreads()
    gm_w, gs_w = kl_gaussian_grad(layer.prior_mu_w, layer.prior_sigma_w, layer.mu_w, sw, direction)
    gm_b, gs_b = kl_gaussian_grad(layer.prior_mu_b, layer.prior_sigma_b, layer.mu_b, sb, direction)
    return {"mu_w": gm_w, "rho_w": gs_w * dw, "mu_b": gm_b, "rho_b": gs_b * db}


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class LayerCache:
    x: np.ndarray
    std: np.ndarray
    eps: np.ndarray
    sigma_w: np.ndarray
    sigma_b: np.ndarray
    dsigma_w: np.ndarray
    dsigma_b: np.ndarray


def forward_local_reparam(layer: VariationalDenseLayer, x: np.ndarray, rng: Optional[np.random.Generator] = None,
                          eps: Optional[np.ndarray] = None, return_cache: bool = False, spreads=None):
    """Sample pre-activations ``m + sqrt(v) * eps`` for a batch ``x``.

    ``m = x mu_w^T + mu_b`` and ``v = x**2 (sigma_w**2)^T + sigma_b**2``.
    Pass ``eps`` to freeze the noise; otherwise it is drawn from ``rng``.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.mu_w.shape[1]:
        raise ValueError(f"input of shape {x.shape} does not match layer with {layer.mu_w.shape[1]} inputs")
    sigma_w, sigma_b, dsigma_w, dsigma_b = spreads or layer.spreads()
    mean = x @ layer.mu_w.T + layer.mu_b
    var = (x * x) @ (sigma_w * sigma_w).T + sigma_b * sigma_b
    std = np.sqrt(var)
    if eps is None:
        if rng is None:
            raise ValueError("need rng or eps")
        eps = rng.standard_normal(mean.shape).astype(mean.dtype, copy=False)
    out = mean + std * eps
    if return_cache:
        return out, LayerCache(x, std, eps, sigma_w, sigma_b, dsigma_w, dsigma_b)
    return out


def backward_local_reparam(layer: VariationalDenseLayer, cache: LayerCache, grad_out: np.ndarray,
                           need_input_grad: bool = True):
    """Reverse pass of :func:`forward_local_reparam`.

    Returns ``(grads, grad_x)`` where ``grads`` maps parameter names to
    arrays shaped like the parameters.
    """
    x = cache.x
    g_var = grad_out * cache.eps / (2.0 * cache.std)
    s2_w = cache.sigma_w * cache.sigma_w
    grads = {
        "mu_w": grad_out.T @ x,
        "mu_b": grad_out.sum(axis=0),
        "rho_w": (g_var.T @ (x * x)) * 2.0 * cache.sigma_w * cache.dsigma_w,
        "rho_b": g_var.sum(axis=0) * 2.0 * cache.sigma_b * cache.dsigma_b,
    }
    grad_x = None
    if need_input_grad:
        grad_x = grad_out @ layer.mu_w + 2.0 * x * (g_var @ s2_w)
    return grads, grad_x


ACTIVATIONS = ("relu", "tanh")


def activate(z, name):
    if name == "relu":
        return np.maximum(z, 0)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(z, a, name):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {name!r}")


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, y):
    """Mean negative log-likelihood and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


@dataclass
class VariationalNetwork:
    layers: list[VariationalDenseLayer]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError("consecutive layer shapes do not chain")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def initialize(cls, widths: Sequence[int], rng, activation="relu", sigma_init=0.05, dtype=np.float64):
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("widths must list at least input and output sizes, all positive")
        layers = [VariationalDenseLayer.initialize(a, b, rng, sigma_init, dtype) for a, b in zip(widths, widths[1:])]
        return cls(layers, activation)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].shape[1]] + [layer.shape[0] for layer in self.layers]

    def copy(self) -> "VariationalNetwork":
        return VariationalNetwork([layer.copy() for layer in self.layers], self.activation)

    def forward(self, X, rng=None, eps: Optional[list] = None, return_cache: bool = False, spreads=None):
        caches = []
        h = X
        for i, layer in enumerate(self.layers):
            z, cache = forward_local_reparam(layer, h, rng, None if eps is None else eps[i], return_cache=True,
                                             spreads=None if spreads is None else spreads[i])
            if i < len(self.layers) - 1:
                a = activate(z, self.activation)
                caches.append((cache, z, a))
                h = a
            else:
                caches.append((cache, z, None))
                h = z
        return (h, caches) if return_cache else h

    def backward(self, caches, grad_logits) -> list[dict[str, np.ndarray]]:
        grads = [None] * len(self.layers)
        g = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            cache, z, a = caches[i]
            if a is not None:
                g = g * activate_grad(z, a, self.activation)
            grads[i], g = backward_local_reparam(self.layers[i], cache, g, need_input_grad=i > 0)
        return grads

    def kl(self, direction="prior_posterior", spreads=None) -> float:
        spreads = spreads or [None] * len(self.layers)
        return sum(layer_kl(layer, direction, sp) for layer, sp in zip(self.layers, spreads))


@dataclass
class LossBreakdown:
    likelihood: float
    kl: float
    kl_weight: float
    kl_scale: float = 1.0

    @property
    def total(self) -> float:
        return self.likelihood + self.kl_weight * self.kl_scale * self.kl


def loss_and_grads(net: VariationalNetwork, X, y, kl_weight: float = 0.1, kl_scale: float = 1.0,
                   rng=None, eps=None, direction: str = "prior_posterior"):
    """Total loss ``NLL + kl_weight * kl_scale * KL`` and its gradients.

    ``kl_scale`` normalises the summed KL (typically ``1 / n_train``).
    """
    spreads = [layer.spreads() for layer in net.layers]
    logits, caches = net.forward(X, rng=rng, eps=eps, return_cache=True, spreads=spreads)
    nll, g_logits = cross_entropy(logits, y)
    grads = net.backward(caches, g_logits)
    kl = 0.0
    if kl_weight:
        c = kl_weight * kl_scale
        for layer, g, sp in zip(net.layers, grads, spreads):
            for name, val in layer_kl_grads(layer, direction, sp).items():
                g[name] += c * val
        kl = net.kl(direction, spreads)
    return LossBreakdown(nll, kl, kl_weight, kl_scale), grads, logits


def mean_weights(net: VariationalNetwork) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(layer.mu_w.copy(), layer.mu_b.copy()) for layer in net.layers]


def plain_forward(weights: Sequence[tuple[np.ndarray, np.ndarray]], X, activation: str = "relu"):
    """Deterministic forward pass with plain ``(W, b)`` pairs; returns logits."""
    h = np.asarray(X)
    for i, (W, b) in enumerate(weights):
        if h.shape[1] != W.shape[1]:
            raise ValueError(f"layer {i} expects {W.shape[1]} inputs, got {h.shape[1]}")
        h = h @ W.T + b
        if i < len(weights) - 1:
            h = activate(h, activation)
    return h
