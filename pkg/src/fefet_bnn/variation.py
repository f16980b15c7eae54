"""Conductance-variation statistics and the polynomial sigma(mu) model."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .device import ConductanceTrace

SIGMA_FLOOR = 1e-4  # uS
MU_EPSILON = 1e-6  # uS
MAX_DEGREE = 9
AVERAGE_GRID_POINTS = 351

#: sigma(mu) coefficients C0..C3 reported for a 1 um / 1 um device read at 1.2 V.
REFERENCE_COEFFICIENTS = (0.0258, 0.788, -0.0214, 2.1e-4)


class RangeClampWarning(UserWarning):
    """A value outside the valid window was clamped to its boundary."""


@dataclass
class VariationStats:
    read_voltage: float
    v_prg: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    n_samples: np.ndarray

    def __post_init__(self):
        self.v_prg = np.asarray(self.v_prg, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.n_samples = np.asarray(self.n_samples, dtype=int)
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        if np.any(self.n_samples < 2):
            raise ValueError("every level needs at least 2 samples")
        if np.any(np.diff(self.v_prg) <= 0):
            raise ValueError("levels must be ordered by program voltage")

    @property
    def levels(self) -> list[tuple[float, float, float, int]]:
        return list(zip(self.v_prg.tolist(), self.mu.tolist(), self.sigma.tolist(), self.n_samples.tolist()))

    def select(self, mask) -> "VariationStats":
        mask = np.asarray(mask)
        return VariationStats(self.read_voltage, self.v_prg[mask], self.mu[mask], self.sigma[mask], self.n_samples[mask])


@dataclass(eq=False)
class VariationFit:
    """Polynomial ``sigma = sum_i C_i mu**i`` valid over ``mu_range``.

    ``scale`` multiplies the polynomial and exists so one measured profile can
    be stretched to a harsher variation level without refitting.
    """

    coefficients: np.ndarray
    read_voltage: float = 1.2
    device_label: str = ""
    mu_range: tuple[float, float] = (0.0, 35.0)
    residual_rms: float = 0.0
    sigma_floor: float = SIGMA_FLOOR
    scale: float = 1.0

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.ndim != 1 or self.coefficients.size < 1:
            raise ValueError("coefficients must be a non-empty vector")
        lo, hi = (float(v) for v in self.mu_range)
        if hi < lo:
            raise ValueError("mu_range must be (min, max)")
        self.mu_range = (lo, hi)
        if self.sigma_floor < 0:
            raise ValueError("sigma_floor must be non-negative")

    def __eq__(self, other):
        if not isinstance(other, VariationFit):
            return NotImplemented
        return (np.array_equal(self.coefficients, other.coefficients)
                and (self.read_voltage, self.device_label, self.mu_range, self.residual_rms,
                     self.sigma_floor, self.scale)
                == (other.read_voltage, other.device_label, other.mu_range, other.residual_rms,
                    other.sigma_floor, other.scale))

    @property
    def degree(self) -> int:
        return self.coefficients.size - 1

    def scaled(self, factor: float) -> "VariationFit":
        return VariationFit(
            self.coefficients.copy(), self.read_voltage, self.device_label,
            self.mu_range, self.residual_rms, self.sigma_floor, self.scale * factor,
        )

    @classmethod
    def reference(cls, mu_range=(0.0, 35.0)) -> "VariationFit":
        return cls(np.array(REFERENCE_COEFFICIENTS), 1.2, "1um/1um", mu_range)


def _stack(traces: Sequence[ConductanceTrace]) -> tuple[np.ndarray, np.ndarray, float]:
    traces = list(traces)
    if len(traces) < 2:
        raise ValueError(f"need at least 2 traces, got {len(traces)}")
    grid = traces[0].v_prg
    for t in traces[1:]:
        if t.v_prg.shape != grid.shape or not np.allclose(t.v_prg, grid, rtol=0, atol=1e-9):
            raise ValueError(f"trace {t.device_label}/{t.cycle_index} has a different program-voltage grid")
    return grid, np.vstack([t.conductance for t in traces]), traces[0].read_voltage


def _stats(grid, samples, read_voltage) -> VariationStats:
    n = samples.shape[0]
    return VariationStats(
        read_voltage, grid, samples.mean(axis=0), samples.std(axis=0, ddof=1), np.full(grid.shape, n)
    )


def c2c_stats(traces: Sequence[ConductanceTrace]) -> VariationStats:
    """Per-level mean and sample std over the cycles of one device."""
    labels = {t.device_label for t in traces}
    if len(labels) > 1:
        raise ValueError("cycle-to-cycle statistics take traces from a single device")
    return _stats(*_stack(traces))


def d2d_stats(traces: Sequence[ConductanceTrace]) -> VariationStats:
    """Per-level mean and sample std across devices (one trace per device)."""
    labels = [t.device_label for t in traces]
    if len(set(labels)) != len(labels):
        raise ValueError("device-to-device statistics take one trace per device")
    return _stats(*_stack(traces))


def combined_stats(traces: Sequence[ConductanceTrace]) -> VariationStats:
    """Pool every (device, cycle) sample at each level.

    Needs either several devices or several cycles; with a single device the
    result is identical to :func:`c2c_stats`.
    """
    return _stats(*_stack(traces))


def _vander(mu: np.ndarray, degree: int) -> np.ndarray:
    return mu[:, None] ** np.arange(degree + 1)


def fit_polynomial(stats: VariationStats, degree: int = 3, sigma_floor: float = SIGMA_FLOOR,
                   device_label: str = "") -> VariationFit:
    """Least-squares polynomial fit of sigma against mu over the stats levels."""
    return _fit(stats.mu, stats.sigma, degree, stats.read_voltage, device_label, sigma_floor)


def _fit(mu, sigma, degree, read_voltage, device_label, sigma_floor) -> VariationFit:
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if not 1 <= degree <= MAX_DEGREE:
        raise ValueError(f"degree must be in [1, {MAX_DEGREE}]")
    if mu.size <= degree:
        raise ValueError(f"{mu.size} levels cannot determine a degree-{degree} polynomial")
    # Columns are normalised before solving so high powers of mu do not swamp the conditioning.
    V = _vander(mu, degree)
    norms = np.sqrt((V * V).sum(axis=0))
    if np.any(norms == 0):
        raise ValueError("design matrix is rank deficient")
    coef, _, rank, sv = np.linalg.lstsq(V / norms, sigma, rcond=None)
    if rank < degree + 1 or sv[-1] <= sv[0] * 1e-13:
        raise ValueError("design matrix is rank deficient (too few distinct mu values)")
    coef = coef / norms
    resid = V @ coef - sigma
    return VariationFit(
        coef, read_voltage, device_label, (float(mu.min()), float(mu.max())),
        float(np.sqrt(np.mean(resid ** 2))), sigma_floor,
    )


def _horner(coefficients, x):
    out = np.zeros_like(x)
    for c in coefficients[::-1]:
        out = out * x + c
    return out


def eval_sigma(fit: VariationFit, mu, warn: bool = True):
    """Polynomial sigma at ``mu``, clamped to the fit window and to the floor.

    Values of ``mu`` outside ``fit.mu_range`` are evaluated at the nearest
    boundary and a :class:`RangeClampWarning` is emitted.
    """
    x = np.asarray(mu, dtype=float)
    lo, hi = fit.mu_range
    outside = (x < lo) | (x > hi)
    if np.any(outside):
        if warn:
            warnings.warn(f"{int(np.sum(outside))} mu value(s) outside {fit.mu_range} clamped",
                          RangeClampWarning, stacklevel=2)
        x = np.clip(x, lo, hi)
    s = np.maximum(fit.scale * _horner(fit.coefficients, x), fit.sigma_floor)
    return s[()] if s.ndim == 0 else s


def out_of_range(fit: VariationFit, mu) -> np.ndarray:
    x = np.asarray(mu, dtype=float)
    return (x < fit.mu_range[0]) | (x > fit.mu_range[1])


def relative_variation(fit: VariationFit, mu, mu_epsilon: float = MU_EPSILON):
    x = np.asarray(mu, dtype=float)
    if np.any(x <= mu_epsilon):
        raise ValueError(f"relative variation is undefined for mu <= {mu_epsilon}")
    return eval_sigma(fit, x) / x


def average_sigma(fit: VariationFit, n_points: int = AVERAGE_GRID_POINTS) -> float:
    """Mean of sigma over a uniform mu grid covering the fit window."""
    grid = np.linspace(fit.mu_range[0], fit.mu_range[1], n_points)
    return float(np.mean(eval_sigma(fit, grid)))


class VariationPolynomial(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``fit(mu, sigma)`` then ``predict(mu)``.

    >>> import numpy as np
    >>> mu = np.linspace(0, 30, 20)
    >>> est = VariationPolynomial(degree=1).fit(mu[:, None], 0.1 + 0.02 * mu)
    >>> np.round(est.coef_, 6).tolist()
    [0.1, 0.02]
    """

    def __init__(self, degree: int = 3, sigma_floor: float = SIGMA_FLOOR, read_voltage: float = 1.2,
                 device_label: str = ""):
        self.degree = degree
        self.sigma_floor = sigma_floor
        self.read_voltage = read_voltage
        self.device_label = device_label

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=2)
        if X.shape[1] != 1:
            raise ValueError("VariationPolynomial expects a single mu column")
        self.fit_ = _fit(X[:, 0], y, self.degree, self.read_voltage, self.device_label, self.sigma_floor)
        self.coef_ = self.fit_.coefficients
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X)
        return eval_sigma(self.fit_, X[:, 0], warn=False)
