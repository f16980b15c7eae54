"""Affine map between weight magnitudes and programmed conductances.

The sign of a weight is not encoded in the conductance; callers keep it
separately. Conductance spreads are pulled back to weight spreads through
the map's constant Jacobian.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .variation import RangeClampWarning, VariationFit, eval_sigma


@dataclass(frozen=True)
class MappingConfig:
    g_min: float
    g_max: float
    w_min: float = 0.0
    w_max: float = 1.0
    # "jacobian" pulls sigma_g back through dw/dg; "relative" uses |w| * sigma_g / g
    sigma_mode: str = "jacobian"

    def __post_init__(self):
        if not self.g_max > self.g_min >= 0:
            raise ValueError("need g_max > g_min >= 0")
        if not self.w_max > self.w_min >= 0:
            raise ValueError("need w_max > w_min >= 0")
        if self.sigma_mode not in ("jacobian", "relative"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")

    @classmethod
    def from_fit(cls, fit: VariationFit, **kw) -> "MappingConfig":
        return cls(g_min=fit.mu_range[0], g_max=fit.mu_range[1], **kw)

    @property
    def slope(self) -> float:
        """Conductance per unit weight magnitude."""
        return (self.g_max - self.g_min) / (self.w_max - self.w_min)


def _clamp(x, lo, hi, what, warn):
    x = np.asarray(x, dtype=float)
    bad = (x < lo) | (x > hi)
    if np.any(bad):
        if warn:
            warnings.warn(f"{int(bad.sum())} {what} value(s) clamped to [{lo}, {hi}]",
                          RangeClampWarning, stacklevel=3)
        x = np.clip(x, lo, hi)
    return x


def weight_to_conductance(w, cfg: MappingConfig, warn: bool = True):
    a = _clamp(np.abs(w), cfg.w_min, cfg.w_max, "|w|", warn)
    # clip guards against rounding just past the window edges
    g = np.clip(cfg.slope * (a - cfg.w_max) + cfg.g_max, cfg.g_min, cfg.g_max)
    return g[()] if g.ndim == 0 else g


def conductance_to_weight(g, sign, cfg: MappingConfig, warn: bool = True):
    g = _clamp(g, cfg.g_min, cfg.g_max, "conductance", warn)
    a = np.clip((g - cfg.g_max) / cfg.slope + cfg.w_max, cfg.w_min, cfg.w_max)
    w = np.where(np.asarray(sign) < 0, -1.0, 1.0) * a
    return w[()] if w.ndim == 0 else w


def weight_sigma(w, cfg: MappingConfig, fit: VariationFit, warn: bool = False):
    """Weight-domain standard deviation implied by the conductance variation model."""
    g = weight_to_conductance(w, cfg, warn=warn)
    sg = eval_sigma(fit, g, warn=warn)
    if cfg.sigma_mode == "relative":
        a = np.clip(np.abs(np.asarray(w, dtype=float)), cfg.w_min, cfg.w_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(g > 0, a * sg / g, sg / cfg.slope)
        s = np.maximum(s, fit.sigma_floor / cfg.slope)
    else:
        s = sg / cfg.slope
    return s[()] if np.ndim(s) == 0 else s


class ConductanceMapper(TransformerMixin, BaseEstimator):
    """Transformer form of the weight/conductance map.

    ``transform`` returns conductances of ``|X|``; ``inverse_transform``
    needs the signs recorded by the last ``transform`` call, or unsigned
    magnitudes if ``signs`` is not supplied.
    """

    def __init__(self, g_min=2.0, g_max=34.0, w_min=0.0, w_max=1.0):
        self.g_min = g_min
        self.g_max = g_max
        self.w_min = w_min
        self.w_max = w_max

    def fit(self, X=None, y=None):
        self.config_ = MappingConfig(self.g_min, self.g_max, self.w_min, self.w_max)
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=float)
        self.signs_ = np.where(X < 0, -1.0, 1.0)
        return weight_to_conductance(X, self.config_)

    def inverse_transform(self, G, signs=None):
        if signs is None:
            signs = np.ones_like(np.asarray(G, dtype=float))
        return conductance_to_weight(G, signs, self.config_)
