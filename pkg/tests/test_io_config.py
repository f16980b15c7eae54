import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fefet_bnn import config as C
from fefet_bnn import io
from fefet_bnn.bnn.estimators import BayesianMLPClassifier, NoisyMLPClassifier
from fefet_bnn.datasets import make_blobs_dataset
from fefet_bnn.device import ConductanceTrace
from fefet_bnn.evaluation import DynamicsCurve, EvalReport, NoisyAccuracy
from fefet_bnn.mapping import MappingConfig
from fefet_bnn.variation import VariationFit, VariationStats

finite = st.floats(0, 1e3, allow_nan=False, allow_infinity=False)


@given(st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=4))
@settings(max_examples=40, deadline=None)
def test_trace_csv_round_trip(tmp_path_factory, conductances):
    path = tmp_path_factory.mktemp("tr") / "t.csv"
    v = np.array([2.0, 2.0 + 1 / 3, 2.7])
    traces = [ConductanceTrace("d0", i, 1.2, v, g) for i, g in enumerate(conductances)]
    io.write_traces(path, traces, "abc")
    back = io.read_traces(path)
    assert len(back) == len(traces)
    for a, b in zip(traces, back):
        assert (a.device_label, a.cycle_index, a.read_voltage) == (b.device_label, b.cycle_index, b.read_voltage)
        np.testing.assert_array_equal(a.v_prg, b.v_prg)
        np.testing.assert_array_equal(a.conductance, b.conductance)


def test_stats_round_trip(tmp_path):
    stats = VariationStats(1.2, [2.0, 2.02, 2.04], [0.1, 1 / 3, 7.25], [1e-7, 0.123456789012345, 2.1e-4], [50, 50, 50])
    io.write_stats(tmp_path / "s.csv", stats, "h")
    back = io.read_stats(tmp_path / "s.csv", 1.2)
    for f in ("v_prg", "mu", "sigma", "n_samples"):
        np.testing.assert_array_equal(getattr(back, f), getattr(stats, f))


def test_fit_round_trip_keeps_full_precision(tmp_path):
    fit = VariationFit(np.array([0.0258, 0.788, -0.0214, 2.1e-4 + 1e-19]), 0.6, "1um/1um", (0.5, 30.25),
                       0.012345678901234567, 1e-4, 8.0)
    io.write_fit(tmp_path / "f.json", fit, "h")
    assert io.read_fit(tmp_path / "f.json") == fit
    assert json.loads((tmp_path / "f.json").read_text())["config_hash"] == "h"


def test_fit_record_degree_checked():
    d = io.fit_to_dict(VariationFit.reference())
    d["degree"] = 2
    with pytest.raises(ValueError):
        io.fit_from_dict(d)


def test_csv_carries_hash_comment(tmp_path):
    io.write_stats(tmp_path / "s.csv", VariationStats(1.2, [1.0, 2.0], [1, 2], [0.1, 0.2], [2, 2]), "deadbeef")
    assert (tmp_path / "s.csv").read_text().startswith("# config_hash=deadbeef\n")


def test_missing_columns(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="missing columns"):
        io.read_traces(tmp_path / "bad.csv")


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write(tmp_path / "sub" / "x.txt", "hello")
    io.atomic_write(tmp_path / "sub" / "x.txt", "again")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.txt"]
    assert (tmp_path / "sub" / "x.txt").read_text() == "again"


@pytest.fixture(scope="module")
def blobs():
    return make_blobs_dataset(n=200, seed=0, n_features=4)


@pytest.mark.parametrize("kind", ["plain", "variational"])
def test_checkpoint_round_trip_and_determinism(tmp_path, blobs, kind):
    common = dict(hidden_layer_sizes=(8,), epochs=2, batch_size=32, random_state=0)
    if kind == "plain":
        model = NoisyMLPClassifier(**common)
    else:
        model = BayesianMLPClassifier(variation_fit=VariationFit.reference(), mapping=MappingConfig(2.0, 34.0),
                                      **common)
    model.fit(blobs.X_train, blobs.y_train)
    io.save_checkpoint(tmp_path / "a.zip", model, "fw", "h", extra={"n_features": 4})
    io.save_checkpoint(tmp_path / "b.zip", model, "fw", "h", extra={"n_features": 4})
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
    ck = io.load_checkpoint(tmp_path / "a.zip")
    assert ck.framework == "fw" and ck.meta["kind"] == kind and ck.meta["n_features"] == 4
    for (W, b), (W2, b2) in zip(model.mean_weights(), ck.mean_weights()):
        np.testing.assert_array_equal(W, W2)
        np.testing.assert_array_equal(b, b2)
    if kind == "variational":
        assert ck.fit == model.variation_fit
        assert ck.mapping == model.mapping


def test_checkpoint_version_checked(tmp_path):
    import zipfile

    with zipfile.ZipFile(tmp_path / "c.zip", "w") as zf:
        zf.writestr("meta.json", json.dumps({"version": 99}))
    with pytest.raises(ValueError, match="version"):
        io.load_checkpoint(tmp_path / "c.zip")


def test_report_files(tmp_path):
    rep = EvalReport(runs=2)
    rep.add("det-clean", "p", 3, NoisyAccuracy([0.5, 0.25]), 0.75)
    io.write_report(tmp_path / "r.csv", tmp_path / "r.json", rep, "h")
    assert io.read_report_rows(tmp_path / "r.csv") == rep.rows
    payload = json.loads((tmp_path / "r.json").read_text())
    assert payload["config_hash"] == "h" and payload["runs"] == 2


def test_dynamics_file(tmp_path):
    curves = [DynamicsCurve("a", 0, [0.1, 0.2], [0.3, 0.4], 1)]
    io.write_dynamics(tmp_path / "d.csv", curves, "noisy_test_acc")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "profile,seed,epoch,train_acc,noisy_test_acc,convergence_epoch"
    assert lines[2] == "a,0,1,0.2,0.4,1"


# ---------------------------------------------------------------------------
# configuration


def test_defaults_validate():
    cfg = C.load_config()
    assert cfg["train"]["kl_weight"] == 0.1
    assert cfg["eval"]["runs"] == 5
    assert cfg["eval"]["dynamics_metric"] == "test_acc"


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"train": {"lr": 0.1}},
    {"train": 3},
    {"train": {"framework": "other"}},
    {"train": {"kl_weight": 2.0}},
    {"eval": {"runs": 0}},
    {"fit": {"degree": 0}},
    {"device": {"n_domains": 0}},
])
def test_invalid_config_rejected(bad):
    with pytest.raises(C.ConfigError):
        C.load_config(overrides=bad)


def test_config_file_errors(tmp_path):
    (tmp_path / "a.json").write_text("[1, 2]")
    (tmp_path / "b.json").write_text("{not json")
    for name in ("a.json", "b.json", "missing.json"):
        with pytest.raises(C.ConfigError):
            C.load_config(str(tmp_path / name))


def test_file_then_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "train": {"epochs": 3}}))
    cfg = C.load_config(str(tmp_path / "c.json"), {"train": {"epochs": 7}})
    assert cfg["seed"] == 4 and cfg["train"]["epochs"] == 7 and cfg["train"]["batch_size"] == 128


def test_hash_stable_and_sensitive():
    a = C.load_config()
    b = C.load_config(overrides={"output_dir": "elsewhere", "threads": 4})
    c = C.load_config(overrides={"seed": 1})
    assert C.config_hash(a) == C.config_hash(b)
    assert C.config_hash(a) != C.config_hash(c)
    assert C.config_hash(json.loads(C.dumps(a))) == C.config_hash(a)


def test_mapping_config_uses_fit_window():
    cfg = C.load_config()
    m = C.mapping_config(cfg, VariationFit.reference(mu_range=(1.5, 29.0)))
    assert (m.g_min, m.g_max) == (1.5, 29.0)
    cfg = C.load_config(overrides={"mapping": {"g_min": 2.0, "g_max": 34.0}})
    m = C.mapping_config(cfg, VariationFit.reference(mu_range=(1.5, 29.0)))
    assert (m.g_min, m.g_max) == (2.0, 34.0)
