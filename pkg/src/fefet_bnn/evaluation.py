"""Noise-injected inference and framework comparisons."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .bnn.estimators import BayesianMLPClassifier, NoisyMLPClassifier
from .bnn.layers import plain_forward
from .bnn.training import TrainingDivergedError, layer_scale
from .mapping import MappingConfig, conductance_to_weight, weight_sigma, weight_to_conductance
from .variation import VariationFit, average_sigma, eval_sigma

logger = logging.getLogger(__name__)

FRAMEWORKS = ("bayes-aware", "bayes-fixed", "det-noisy", "det-clean")


@dataclass
class VariationProfile:
    """A (device, read voltage) variation model plus the weight mapping used with it."""

    name: str
    fit: VariationFit
    mapping: Optional[MappingConfig] = None

    def __post_init__(self):
        if self.mapping is None:
            self.mapping = MappingConfig.from_fit(self.fit)

    @property
    def read_voltage(self) -> float:
        return self.fit.read_voltage

    @property
    def device_label(self) -> str:
        return self.fit.device_label

    def scaled(self, factor: float, name: Optional[str] = None) -> "VariationProfile":
        return VariationProfile(name or f"{self.name}x{factor:g}", self.fit.scaled(factor), self.mapping)

    def relative_noise(self) -> float:
        """Average spread over mean conductance across the window, for the multiplicative baseline."""
        lo, hi = self.fit.mu_range
        mid = 0.5 * (lo + hi)
        return average_sigma(self.fit) / mid if mid > 0 else 0.0


def _perturb_normalised(w, profile: VariationProfile, rng, mode: str):
    cfg = profile.mapping
    sign = np.where(w < 0, -1.0, 1.0)
    a = np.abs(w)
    if mode == "weight":
        s = weight_sigma(a, cfg, profile.fit)
        mag = np.clip(a + s * rng.standard_normal(a.shape), cfg.w_min, cfg.w_max)
        return sign * mag
    if mode == "conductance":
        g = weight_to_conductance(a, cfg, warn=False)
        g = np.clip(g + eval_sigma(profile.fit, g, warn=False) * rng.standard_normal(g.shape), cfg.g_min, cfg.g_max)
        return conductance_to_weight(g, sign, cfg, warn=False)
    raise ValueError(f"unknown injection mode {mode!r}")


def inject_variation(weights, profile: VariationProfile, seed=None, mode: str = "weight", rng=None):
    """Perturb weights with device-dependent Gaussian noise on their magnitudes.

    ``weights`` is either one array of already-normalised weights or a list
    of ``(W, b)`` pairs; pairs are max-abs normalised per layer, perturbed,
    and scaled back. Signs are preserved and magnitudes stay inside the
    mapping's weight window.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    if isinstance(weights, np.ndarray):
        return _perturb_normalised(np.asarray(weights, dtype=float), profile, rng, mode)
    out = []
    for W, b in weights:
        s = layer_scale(W, b)
        Wn = _perturb_normalised(np.asarray(W, dtype=float) / s, profile, rng, mode) * s
        bn = _perturb_normalised(np.asarray(b, dtype=float) / s, profile, rng, mode) * s
        out.append((Wn.astype(W.dtype), bn.astype(b.dtype)))
    return out


def evaluate_accuracy(weights, X, y, activation: str = "relu") -> float:
    """Top-1 accuracy of a plain forward pass; ties go to the lowest class index."""
    logits = plain_forward(weights, X, activation)
    if logits.shape[0] != len(y):
        raise ValueError("number of samples and labels differ")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


@dataclass
class NoisyAccuracy:
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> Optional[float]:
        if len(self.accuracies) < 2:
            return None
        return float(np.std(self.accuracies, ddof=1))


def noisy_inference(weights, profile: VariationProfile, X, y, runs: int = 5, seed=0,
                    activation: str = "relu", mode: str = "weight") -> NoisyAccuracy:
    """Accuracy under ``runs`` independent variation draws."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(runs)]
    accs = [evaluate_accuracy(inject_variation(weights, profile, mode=mode, rng=r), X, y, activation) for r in rngs]
    return NoisyAccuracy(accs)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    runs: int
    rows: list[dict] = field(default_factory=list)
    clean: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def add(self, framework, profile, seed, result: NoisyAccuracy, clean_acc: float):
        for r, acc in enumerate(result.accuracies):
            self.rows.append({"framework": framework, "profile": profile, "seed": seed, "run": r, "accuracy": acc})
        self.clean.append({"framework": framework, "profile": profile, "seed": seed, "accuracy": clean_acc})

    def accuracies(self, framework, profile, seed=None) -> np.ndarray:
        return np.array([r["accuracy"] for r in self.rows if r["framework"] == framework
                         and r["profile"] == profile and (seed is None or r["seed"] == seed)])

    def seed_means(self, framework, profile) -> dict:
        seeds = sorted({r["seed"] for r in self.rows if r["framework"] == framework and r["profile"] == profile})
        return {s: float(self.accuracies(framework, profile, s).mean()) for s in seeds}

    def clean_accuracy(self, framework, profile=None) -> np.ndarray:
        return np.array([c["accuracy"] for c in self.clean if c["framework"] == framework
                         and (profile is None or c["profile"] == profile)])

    def aggregates(self) -> list[dict]:
        keys = sorted({(r["framework"], r["profile"]) for r in self.rows})
        out = []
        for fw, prof in keys:
            acc = self.accuracies(fw, prof)
            entry = {"framework": fw, "profile": prof, "n": int(acc.size), "mean": float(acc.mean())}
            if acc.size > 1:
                entry["std"] = float(acc.std(ddof=1))
            clean = self.clean_accuracy(fw, prof)
            entry["clean_mean"] = float(clean.mean())
            out.append(entry)
        return out

    def to_json(self) -> str:
        return json.dumps({"runs": self.runs, "aggregates": self.aggregates(), "clean": self.clean,
                           "failures": self.failures}, indent=2, sort_keys=True)


@dataclass
class ExperimentSettings:
    """Shared training settings for framework comparisons."""

    hidden_layer_sizes: tuple = (256, 128)
    epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    kl_weight: float = 0.1
    kl_normalization: str = "dataset"
    sigma_init: float = 0.05
    runs: int = 5
    det_noise_std: Optional[float] = None  # None: derived from the profile
    dtype: str = "float32"

    def common(self) -> dict:
        return dict(hidden_layer_sizes=tuple(self.hidden_layer_sizes), epochs=self.epochs,
                    batch_size=self.batch_size, learning_rate=self.learning_rate,
                    lr_decay_every=self.lr_decay_every, lr_decay_factor=self.lr_decay_factor, dtype=self.dtype)


def make_estimator(framework: str, profile: Optional[VariationProfile], settings: ExperimentSettings, seed: int):
    common = settings.common()
    if framework == "det-clean":
        return NoisyMLPClassifier(noise_std=0.0, random_state=seed, **common)
    if framework == "det-noisy":
        std = settings.det_noise_std if settings.det_noise_std is not None else profile.relative_noise()
        return NoisyMLPClassifier(noise_std=std, random_state=seed, **common)
    bayes = dict(kl_weight=settings.kl_weight, kl_normalization=settings.kl_normalization,
                 sigma_init=settings.sigma_init, variation_fit=profile.fit, mapping=profile.mapping,
                 random_state=seed, **common)
    if framework == "bayes-aware":
        return BayesianMLPClassifier(prior="device", **bayes)
    if framework == "bayes-fixed":
        return BayesianMLPClassifier(prior="fixed", **bayes)
    raise ValueError(f"unknown framework {framework!r}")


def compare_frameworks(dataset, profiles: Sequence[VariationProfile], settings: ExperimentSettings,
                       seeds: Sequence[int] = (0,), frameworks: Sequence[str] = FRAMEWORKS,
                       eval_seed: int = 1234) -> EvalReport:
    """Train every framework for each seed and evaluate it under every profile.

    Profile-dependent frameworks are trained once per profile; det-clean is
    trained once per seed. The same noise draws are used for every framework
    (paired evaluation). A failed cell is recorded and skipped.
    """
    report = EvalReport(settings.runs)
    ds = dataset
    for seed in seeds:
        clean_model = None
        for prof in profiles:
            for fw in frameworks:
                try:
                    if fw == "det-clean":
                        if clean_model is None:
                            clean_model = make_estimator(fw, None, settings, seed).fit(ds.X_train, ds.y_train)
                        model = clean_model
                    else:
                        model = make_estimator(fw, prof, settings, seed).fit(ds.X_train, ds.y_train)
                except (TrainingDivergedError, ValueError) as exc:
                    logger.warning("cell %s/%s/seed %s failed: %s", fw, prof.name, seed, exc)
                    report.failures.append({"framework": fw, "profile": prof.name, "seed": seed, "error": str(exc)})
                    continue
                w = model.mean_weights()
                res = noisy_inference(w, prof, ds.X_test, ds.y_test, settings.runs, seed=[eval_seed, seed])
                report.add(fw, prof.name, seed, res, evaluate_accuracy(w, ds.X_test, ds.y_test))
                logger.info("%s %s seed %d: clean %.4f noisy %.4f", fw, prof.name, seed,
                            report.clean[-1]["accuracy"], res.mean)
    return report


def convergence_epoch(accuracy: Sequence[float], window: int = 3, tolerance: float = 0.005) -> int:
    """First epoch whose trailing moving average is within ``tolerance`` of the final average."""
    acc = np.asarray(accuracy, dtype=float)
    if acc.size < window:
        return acc.size - 1
    ma = np.convolve(acc, np.ones(window) / window, mode="valid")
    final = ma[-1]
    hits = np.flatnonzero(np.abs(ma - final) <= tolerance)
    return int(hits[0] + window - 1)


@dataclass
class DynamicsCurve:
    profile: str
    seed: int
    train_acc: list[float]
    test_acc: list[float]
    convergence_epoch: int


DYNAMICS_METRICS = ("test_acc", "train_acc", "noisy_test_acc")


def training_dynamics(dataset, profiles: Sequence[VariationProfile], settings: ExperimentSettings,
                      seeds: Sequence[int] = (0,), metric: str = "test_acc",
                      eval_seed: int = 1234) -> list[DynamicsCurve]:
    """Per-epoch accuracy of variation-aware training, one curve per profile and seed.

    The convergence epoch is computed from ``metric``: ``"test_acc"`` is the
    held-out accuracy of each epoch's posterior-mean network, ``"train_acc"``
    the running training accuracy. With ``"noisy_test_acc"`` the recorded test
    accuracy is measured under the profile's own variation instead (one draw
    per epoch, the same draw sequence for every profile).
    """
    if len(profiles) < 2:
        raise ValueError("need at least two profiles to compare training dynamics")
    if metric not in DYNAMICS_METRICS:
        raise ValueError(f"metric must be one of {DYNAMICS_METRICS}, got {metric!r}")
    curves = []
    ds = dataset
    for seed in seeds:
        for prof in profiles:
            est = make_estimator("bayes-aware", prof, settings, seed)
            scorer = None
            if metric == "noisy_test_acc":
                scorer = _noisy_scorer(prof, ds.X_test, ds.y_test, [eval_seed, seed], est.activation)
            est.fit(ds.X_train, ds.y_train, X_val=ds.X_test, y_val=ds.y_test, scorer=scorer)
            tr = [h.train_acc for h in est.history_]
            te = [h.test_acc for h in est.history_]
            curves.append(DynamicsCurve(prof.name, seed, tr, te, convergence_epoch(tr if metric == "train_acc" else te)))
    return curves


def _noisy_scorer(profile: VariationProfile, X, y, seed, activation: str):
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    def score(weights):
        noisy = inject_variation(weights, profile, rng=rng)
        return evaluate_accuracy(noisy, X, y, activation)

    return score
