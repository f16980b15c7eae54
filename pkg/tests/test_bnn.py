import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from fefet_bnn.bnn import (
    BayesianMLPClassifier,
    NoisyMLPClassifier,
    TrainingDivergedError,
    VariationalNetwork,
    forward_local_reparam,
    kl_gaussian,
    loss_and_grads,
    mean_weights,
    plain_forward,
)
from fefet_bnn.bnn.layers import inverse_softplus, kl_gaussian_grad, layer_kl_grads, softplus
from fefet_bnn.bnn.training import (
    TrainConfig,
    fixed_sigma_from_fit,
    init_plain_weights,
    layer_scale,
    plain_loss_and_grads,
    train_plain,
    train_variational,
    update_prior,
    update_prior_fixed,
)
from fefet_bnn.datasets import make_blobs_dataset, make_digits_dataset
from fefet_bnn.mapping import MappingConfig, weight_sigma
from fefet_bnn.variation import VariationFit

PUB = VariationFit.reference()
CFG = MappingConfig.from_fit(PUB)


def _net(widths, seed=0, sigma_init=0.05, activation="tanh"):
    return VariationalNetwork.initialize(widths, np.random.default_rng(seed), activation, sigma_init, np.float64)


def _frozen_eps(net, n, seed=1):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, layer.shape[0])) for layer in net.layers]


def _randomize_priors(net, rng):
    for layer in net.layers:
        layer.set_prior(layer.mu_w + 0.1 * rng.standard_normal(layer.mu_w.shape),
                        rng.uniform(0.02, 0.2, layer.mu_w.shape),
                        layer.mu_b + 0.1 * rng.standard_normal(layer.mu_b.shape),
                        rng.uniform(0.02, 0.2, layer.mu_b.shape))


def finite_difference_check(net, X, y, eps, kl_weight, direction, h=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    _, grads, _ = loss_and_grads(net, X, y, kl_weight, 1.0, eps=eps, direction=direction)
    worst = 0.0
    for layer, g in zip(net.layers, grads):
        for name in ("mu_w", "rho_w", "mu_b", "rho_b"):
            arr = getattr(layer, name)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = loss_and_grads(net, X, y, kl_weight, 1.0, eps=eps, direction=direction)[0].total
                arr[idx] = old - h
                down = loss_and_grads(net, X, y, kl_weight, 1.0, eps=eps, direction=direction)[0].total
                arr[idx] = old
                num = (up - down) / (2 * h)
                ana = g[name][idx]
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


# ---------------------------------------------------------------- softplus / KL


@given(st.floats(-30, 30))
def test_softplus_positive_and_invertible(x):
    s = softplus(x)
    assert s > 0
    if x > -20:
        assert inverse_softplus(s) == pytest.approx(x, rel=1e-6, abs=1e-6)


def test_kl_examples():
    assert kl_gaussian(0.3, 1.7, 0.3, 1.7) == 0.0
    assert abs(kl_gaussian(0.0, 2.0, 0.0, 1.0) - 0.806853) < 1e-6
    assert kl_gaussian(1.0, 1.0, 0.0, 1.0) == pytest.approx(0.5)
    # summed over entries
    assert kl_gaussian(np.ones(3), np.ones(3), np.zeros(3), np.ones(3)) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        kl_gaussian(0, 0.0, 0, 1)
    with pytest.raises(ValueError):
        kl_gaussian(0, 1, 0, -1)


def test_kl_direction_switch():
    a = kl_gaussian(0.1, 2.0, 0.4, 0.5, "prior_posterior")
    b = kl_gaussian(0.4, 0.5, 0.1, 2.0, "posterior_prior")
    assert a == pytest.approx(b, rel=1e-14)
    with pytest.raises(ValueError):
        kl_gaussian(0, 1, 0, 1, "sideways")


@settings(max_examples=200)
@given(st.floats(-5, 5), st.floats(1e-3, 10), st.floats(-5, 5), st.floats(1e-3, 10),
       st.sampled_from(["prior_posterior", "posterior_prior"]))
def test_kl_non_negative(mp, sp, mq, sq, direction):
    assert kl_gaussian(mp, sp, mq, sq, direction) >= -1e-12


@pytest.mark.parametrize("direction", ["prior_posterior", "posterior_prior"])
def test_kl_gradient_matches_finite_difference(direction):
    rng = np.random.default_rng(3)
    mp, sp, mq, sq = rng.normal(size=5), rng.uniform(0.2, 2, 5), rng.normal(size=5), rng.uniform(0.2, 2, 5)
    g_mu, g_s = kl_gaussian_grad(mp, sp, mq, sq, direction)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        num_mu = (kl_gaussian(mp, sp, mq + e, sq, direction) - kl_gaussian(mp, sp, mq - e, sq, direction)) / (2 * h)
        num_s = (kl_gaussian(mp, sp, mq, sq + e, direction) - kl_gaussian(mp, sp, mq, sq - e, direction)) / (2 * h)
        assert g_mu[i] == pytest.approx(num_mu, rel=1e-5, abs=1e-8)
        assert g_s[i] == pytest.approx(num_s, rel=1e-5, abs=1e-8)


def test_kl_only_gradient_vanishes_for_matched_means():
    layer = _net([3, 2]).layers[0]
    layer.set_prior(layer.mu_w, 0.3, layer.mu_b, 0.3)
    g = layer_kl_grads(layer)
    np.testing.assert_array_equal(g["mu_w"], 0.0)
    np.testing.assert_array_equal(g["mu_b"], 0.0)


def test_prior_tracking_kl_is_minimised_at_matching_spread():
    _, g_sigma = kl_gaussian_grad(0.2, 0.07, 0.2, 0.07)
    assert g_sigma == pytest.approx(0.0, abs=1e-12)
    s = np.linspace(0.02, 0.3, 200)
    kl = np.array([kl_gaussian(0.2, 0.07, 0.2, v) for v in s])
    assert s[np.argmin(kl)] == pytest.approx(0.07, abs=0.002)


# ---------------------------------------------------------------- forward


def test_forward_zero_spread_is_affine():
    layer = _net([4, 3], sigma_init=1e-30).layers[0]
    x = np.random.default_rng(0).normal(size=(5, 4))
    out = forward_local_reparam(layer, x, np.random.default_rng(1))
    np.testing.assert_allclose(out, x @ layer.mu_w.T + layer.mu_b, atol=1e-12)


def test_forward_zero_input_gives_bias_noise():
    layer = _net([4, 3]).layers[0]
    eps = np.random.default_rng(2).standard_normal((2, 3))
    out = forward_local_reparam(layer, np.zeros((2, 4)), eps=eps)
    np.testing.assert_allclose(out, layer.mu_b + layer.sigma_b * eps, rtol=1e-12)


def test_forward_shape_mismatch():
    layer = _net([4, 3]).layers[0]
    with pytest.raises(ValueError):
        forward_local_reparam(layer, np.zeros((2, 5)), np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward_local_reparam(layer, np.zeros((2, 4)))


def test_local_reparam_matches_weight_space_sampling():
    rng = np.random.default_rng(5)
    layer = _net([6, 2], sigma_init=0.3).layers[0]
    x = rng.normal(size=(1, 6))
    n = 100_000
    local = forward_local_reparam(layer, np.repeat(x, n, axis=0), rng)
    W = layer.mu_w + layer.sigma_w * rng.standard_normal((n, 2, 6))
    b = layer.mu_b + layer.sigma_b * rng.standard_normal((n, 2))
    direct = np.einsum("nij,j->ni", W, x[0]) + b
    scale = np.sqrt(direct.mean(0) ** 2 + direct.var(0))
    assert np.all(np.abs(local.mean(0) - direct.mean(0)) <= 0.02 * scale)
    np.testing.assert_allclose(local.var(0), direct.var(0), rtol=0.02)


# ---------------------------------------------------------------- backward


@pytest.mark.parametrize("direction", ["prior_posterior", "posterior_prior"])
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_gradients_match_finite_differences(direction, activation):
    rng = np.random.default_rng(0)
    net = _net([2, 3, 2], seed=1, sigma_init=0.2, activation=activation)
    _randomize_priors(net, rng)
    X = rng.normal(size=(4, 2))
    y = np.array([0, 1, 1, 0])
    worst = finite_difference_check(net, X, y, _frozen_eps(net, 4), 0.3, direction)
    assert worst < 1e-4


def test_zero_spread_zero_kl_matches_plain_backprop():
    net = _net([3, 4, 2], sigma_init=1e-30, activation="relu")
    rng = np.random.default_rng(8)
    X = rng.normal(size=(6, 3))
    y = rng.integers(0, 2, 6)
    br, grads, _ = loss_and_grads(net, X, y, 0.0, rng=rng)
    w = [[layer.mu_w, layer.mu_b] for layer in net.layers]
    loss, pgrads, _ = plain_loss_and_grads(w, X, y, "relu")
    assert br.likelihood == pytest.approx(loss, rel=1e-12)
    for g, pg in zip(grads, pgrads):
        np.testing.assert_allclose(g["mu_w"], pg["W"], rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(g["mu_b"], pg["b"], rtol=1e-10, atol=1e-14)


def test_loss_breakdown_total():
    net = _net([2, 2])
    X = np.ones((3, 2))
    br, _, _ = loss_and_grads(net, X, np.array([0, 1, 0]), 0.1, 0.01, rng=np.random.default_rng(0))
    assert br.total == pytest.approx(br.likelihood + 0.1 * 0.01 * br.kl)
    assert br.kl >= 0


# ---------------------------------------------------------------- priors


def test_update_prior_tracks_means_and_uses_device_spread():
    net = _net([5, 4, 3])
    update_prior(net, PUB, CFG)
    for layer in net.layers:
        np.testing.assert_array_equal(layer.prior_mu_w, layer.mu_w)
        s = layer_scale(layer.mu_w, layer.mu_b)
        expected = weight_sigma(np.abs(layer.mu_w) / s, CFG, PUB) * s
        np.testing.assert_allclose(layer.prior_sigma_w, expected, rtol=1e-12)
        sw, sb = layer.sigma_w, layer.sigma_b
        kl_mean_shift = (layer.prior_mu_w - layer.mu_w) ** 2 / (2 * sw ** 2)
        np.testing.assert_array_equal(kl_mean_shift, 0.0)


def test_update_prior_equal_means_equal_spreads():
    net = _net([4, 3])
    layer = net.layers[0]
    layer.mu_w[:] = 0.2
    layer.mu_b[:] = 0.2
    update_prior(net, PUB, CFG)
    assert np.unique(layer.prior_sigma_w).size == 1


def test_prior_spread_ordering_follows_fit():
    # the reference cubic grows with conductance while sigma/mu shrinks
    net = _net([2, 1])
    layer = net.layers[0]
    layer.mu_w[:] = [[0.1, 1.0]]
    layer.mu_b[:] = 0.5
    update_prior(net, PUB, CFG)
    low, high = layer.prior_sigma_w[0]
    assert low < high
    assert low / 0.1 > high / 1.0


def test_update_prior_requires_fit():
    with pytest.raises(ValueError):
        update_prior(_net([2, 2]), None, CFG)


def test_fixed_prior():
    net = _net([3, 2])
    sf = fixed_sigma_from_fit(PUB, CFG)
    update_prior_fixed(net, sf)
    layer = net.layers[0]
    s = layer_scale(layer.mu_w, layer.mu_b)
    np.testing.assert_allclose(layer.prior_sigma_w, sf * s)
    with pytest.raises(ValueError):
        update_prior_fixed(net, 0.0)


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def blobs():
    return make_blobs_dataset(400, seed=0)


@pytest.fixture(scope="module")
def digits():
    return make_digits_dataset(seed=0)


def _bayes(**kw):
    base = dict(hidden_layer_sizes=(16,), variation_fit=PUB, mapping=CFG, epochs=10, batch_size=32,
                learning_rate=1e-2, dtype="float64", random_state=0)
    base.update(kw)
    return BayesianMLPClassifier(**base)


def test_bayes_separates_toy_set(blobs):
    est = _bayes(epochs=50).fit(blobs.X_train, blobs.y_train)
    assert est.score(blobs.X_train, blobs.y_train) >= 0.99


def test_noisy_baseline_separates_toy_set(blobs):
    clean = NoisyMLPClassifier((16,), epochs=50, batch_size=32, learning_rate=1e-2, dtype="float64")
    noisy = clone(clean).set_params(noise_std=0.1)
    a = clean.fit(blobs.X_train, blobs.y_train).score(blobs.X_train, blobs.y_train)
    b = noisy.fit(blobs.X_train, blobs.y_train).score(blobs.X_train, blobs.y_train)
    assert a >= 0.99
    assert b >= 0.95 * a


def test_zero_kl_tiny_spread_tracks_deterministic_training(digits):
    common = dict(hidden_layer_sizes=(32,), epochs=3, batch_size=64, learning_rate=1e-3, dtype="float64",
                  random_state=4)
    bayes = BayesianMLPClassifier(variation_fit=PUB, mapping=CFG, kl_weight=0.0, sigma_init=1e-8, **common)
    plain = NoisyMLPClassifier(**common)
    hb = [h.likelihood for h in bayes.fit(digits.X_train, digits.y_train).history_]
    hp = [h.likelihood for h in plain.fit(digits.X_train, digits.y_train).history_]
    np.testing.assert_allclose(hb, hp, rtol=1e-4)


def test_zero_noise_is_plain_training(digits):
    a = NoisyMLPClassifier((16,), epochs=2, noise_std=0.0, random_state=1).fit(digits.X_train, digits.y_train)
    b = NoisyMLPClassifier((16,), epochs=2, random_state=1).fit(digits.X_train, digits.y_train)
    for (w1, b1), (w2, b2) in zip(a.mean_weights(), b.mean_weights()):
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(b1, b2)


@pytest.mark.parametrize("prior", ["device", "fixed"])
def test_training_is_deterministic(digits, prior):
    a = _bayes(prior=prior, epochs=2).fit(digits.X_train, digits.y_train)
    b = _bayes(prior=prior, epochs=2).fit(digits.X_train, digits.y_train)
    for la, lb in zip(a.network_.layers, b.network_.layers):
        for name in ("mu_w", "rho_w", "mu_b", "rho_b"):
            np.testing.assert_array_equal(getattr(la, name), getattr(lb, name))


def test_noisy_training_is_deterministic(digits):
    a = NoisyMLPClassifier((16,), epochs=2, noise_std=0.2, random_state=3).fit(digits.X_train, digits.y_train)
    b = NoisyMLPClassifier((16,), epochs=2, noise_std=0.2, random_state=3).fit(digits.X_train, digits.y_train)
    np.testing.assert_array_equal(a.weights_[0][0], b.weights_[0][0])


def test_fixed_prior_equals_device_prior_for_constant_fit(digits):
    flat = VariationFit(np.array([0.8]), mu_range=(0.0, 30.0))
    cfg = MappingConfig.from_fit(flat)
    a = _bayes(prior="device", variation_fit=flat, mapping=cfg, epochs=2).fit(digits.X_train, digits.y_train)
    b = _bayes(prior="fixed", variation_fit=flat, mapping=cfg, epochs=2).fit(digits.X_train, digits.y_train)
    assert b.sigma_f_ == pytest.approx(0.8 / 30.0)
    for la, lb in zip(a.network_.layers, b.network_.layers):
        np.testing.assert_allclose(la.mu_w, lb.mu_w, rtol=1e-9, atol=1e-12)


def test_training_accuracy_trend_increases():
    from fefet_bnn.datasets import load_dataset

    ds = load_dataset("mnist10k", subset=2000, seed=0)
    est = _bayes(hidden_layer_sizes=(64,), epochs=15, learning_rate=1e-3, batch_size=128)
    est.fit(ds.X_train, ds.y_train)
    acc = np.array([h.train_acc for h in est.history_])
    ma = np.convolve(acc, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) > 0)


def test_snapshot_is_zero_spread_forward(digits):
    est = _bayes(epochs=2).fit(digits.X_train, digits.y_train)
    X = digits.X_test[:20]
    net = est.network_.copy()
    for layer in net.layers:
        layer.rho_w[:] = -1e3
        layer.rho_b[:] = -1e3
    np.testing.assert_allclose(net.forward(X, np.random.default_rng(0)), est.decision_function(X), atol=1e-10)


def test_snapshot_unchanged_by_zero_learning_rate(digits):
    est = _bayes(epochs=2).fit(digits.X_train, digits.y_train)
    before = est.mean_weights()
    est.continue_fit(digits.X_train, digits.y_train, epochs=1, learning_rate=0.0)
    for (w1, b1), (w2, b2) in zip(before, est.mean_weights()):
        np.testing.assert_array_equal(w1, w2)
        np.testing.assert_array_equal(b1, b2)
    assert est.epochs_trained_ == 3


def test_snapshot_beats_stochastic_forward(digits):
    est = _bayes(epochs=10, sigma_init=0.1, kl_weight=0.0).fit(digits.X_train, digits.y_train)
    X, y = digits.X_test, digits.y_test
    snap = est.score(X, y)
    rng = np.random.default_rng(0)
    stoch = [np.mean(np.argmax(est.network_.forward(X, rng), axis=1) == y) for _ in range(20)]
    assert snap >= np.mean(stoch)


def test_divergence_raises(digits):
    X = digits.X_train[:256].astype(np.float64) * 1e308
    y = digits.y_train[:256]
    cfg = TrainConfig(epochs=2, batch_size=64)
    weights = init_plain_weights([64, 8, 10], np.random.default_rng(0))
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        train_plain(weights, X, y, cfg)
    net = _net([64, 8, 10])
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        train_variational(net, X, y, cfg, lambda n: update_prior(n, PUB, CFG))


def test_train_config_validation_and_schedule():
    cfg = TrainConfig(learning_rate=1e-3)
    assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(10) == 5e-4 and cfg.lr_at(25) == 2.5e-4
    assert cfg.kl_scale(1000) == pytest.approx(1e-3)
    for bad in (dict(kl_weight=1.5), dict(batch_size=0), dict(mc_samples=0), dict(kl_normalization="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- estimator API


def test_estimator_api(digits):
    est = _bayes(epochs=1)
    assert clone(est).get_params() == est.get_params()
    labels = np.array(list("abcdefghij"))[digits.y_train]
    est.fit(digits.X_train, labels)
    assert set(est.predict(digits.X_test[:10])) <= set("abcdefghij")
    proba = est.predict_proba(digits.X_test[:10])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        _bayes(variation_fit=None).fit(digits.X_train, digits.y_train)
    with pytest.raises(ValueError):
        _bayes(prior="uniform").fit(digits.X_train, digits.y_train)


def test_mc_samples_and_epoch_prior_update(digits):
    est = _bayes(epochs=1, mc_samples=2, prior_update="epoch").fit(digits.X_train, digits.y_train)
    assert len(est.history_) == 1


def test_plain_forward_matches_mean_weights(digits):
    est = _bayes(epochs=1).fit(digits.X_train, digits.y_train)
    np.testing.assert_allclose(plain_forward(mean_weights(est.network_), digits.X_test, "relu"),
                               est.decision_function(digits.X_test))
