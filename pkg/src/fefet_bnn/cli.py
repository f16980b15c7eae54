"""Command-line entry point: ``fefet-bnn <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from . import config as C
from . import device, io, variation
from .bnn.training import TrainingDivergedError
from .datasets import DatasetError, load_dataset
from .evaluation import (
    FRAMEWORKS,
    EvalReport,
    ExperimentSettings,
    VariationProfile,
    compare_frameworks,
    evaluate_accuracy,
    make_estimator,
    noisy_inference,
    training_dynamics,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "FEFET_BNN_OUTPUT"

logger = logging.getLogger("fefet_bnn")


class DataError(Exception):
    pass


def _output_dir(args, cfg) -> Path:
    out = args.out or cfg["output_dir"] or os.environ.get(OUTPUT_ENV) or "fefet_bnn_out"
    return Path(out)


def _finish(cfg, out: Path, name: str) -> str:
    h = C.config_hash(cfg)
    io.atomic_write(out / f"{name}.resolved.json", C.dumps(cfg))
    return h


def _overrides(args, mapping: dict) -> dict:
    """Nest CLI flag values under their config sections; unset flags are skipped."""
    ov: dict = {}
    for attr, path in mapping.items():
        val = getattr(args, attr, None)
        if val is None:
            continue
        node = ov
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = val
    return ov


def _load(args, flags: dict) -> dict:
    ov = _overrides(args, {"seed": ("seed",), "threads": ("threads",), **flags})
    return C.load_config(args.config, ov)


def _settings(cfg) -> ExperimentSettings:
    t = cfg["train"]
    return ExperimentSettings(
        hidden_layer_sizes=tuple(cfg["network"]["hidden_layer_sizes"]), epochs=t["epochs"],
        batch_size=t["batch_size"], learning_rate=t["learning_rate"], lr_decay_every=t["lr_decay_every"],
        lr_decay_factor=t["lr_decay_factor"], kl_weight=t["kl_weight"], kl_normalization=t["kl_normalization"],
        sigma_init=t["sigma_init"], runs=cfg["eval"]["runs"], det_noise_std=t["det_noise_std"], dtype=t["dtype"],
    )


def _dataset(cfg):
    d = cfg["dataset"]
    try:
        return load_dataset(d["name"], subset=d["subset"], seed=cfg["seed"], test_size=d["test_size"])
    except (DatasetError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _profiles(cfg, fit_paths, scale=None) -> list[VariationProfile]:
    if not fit_paths:
        raise C.ConfigError("at least one --fit record is required")
    scale = cfg["eval"]["profile_scale"] if scale is None else scale
    out = []
    for p in fit_paths:
        try:
            fit = io.read_fit(p)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read fit {p}: {exc}") from exc
        prof = VariationProfile(Path(p).stem, fit, C.mapping_config(cfg, fit))
        out.append(prof.scaled(scale, prof.name) if scale != 1.0 else prof)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = _load(args, {"devices": ("campaign", "devices"), "cycles": ("campaign", "cycles"),
                       "mode": ("campaign", "mode"), "read_voltage": ("pulse", "read_voltage")})
    out = _output_dir(args, cfg)
    geo, params, scheme = C.geometry(cfg), C.sim_params(cfg), C.pulse_scheme(cfg)
    camp = cfg["campaign"]
    mode = camp["mode"]
    if mode == "combined" and camp["cycles"] < 2:
        mode = "d2d"  # one cycle per device is a pure device-to-device campaign
    if mode == "d2d":
        traces = device.monte_carlo_d2d(geo, params, scheme, camp["devices"], cfg["seed"], n_jobs=cfg["threads"])
    elif mode == "c2c":
        traces = device.monte_carlo_c2c(geo, params, scheme, camp["cycles"], cfg["seed"], "dev0000")
    else:
        traces = device.monte_carlo_combined(geo, params, scheme, camp["devices"], camp["cycles"], cfg["seed"])
    h = _finish(cfg, out, "simulate")
    by_device: dict[str, list] = {}
    for t in traces:
        by_device.setdefault(t.device_label, []).append(t)
    files = []
    for label, ts in sorted(by_device.items()):
        name = f"traces/{label}.csv"
        io.write_traces(out / name, ts, h)
        files.append(name)
    manifest = {"config_hash": h, "geometry": geo.label, "n_domains": geo.n_domains, "mode": mode,
                "n_traces": len(traces), "points_per_trace": int(traces[0].v_prg.size), "files": files}
    io.atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} trace files ({len(traces)} traces x {manifest['points_per_trace']} points) to {out}")
    return EXIT_OK


def _collect_traces(path) -> list:
    p = Path(path)
    files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
    if p.is_dir() and (p / "traces").is_dir():
        files = sorted((p / "traces").glob("*.csv"))
    traces = []
    for f in files:
        traces.extend(io.read_traces(f))
    return traces


def cmd_characterize(args) -> int:
    cfg = _load(args, {"degree": ("fit", "degree"), "kind": ("fit", "kind")})
    out = _output_dir(args, cfg)
    try:
        traces = _collect_traces(args.traces)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if len(traces) < 2:
        raise DataError(f"need at least 2 traces to estimate variation, found {len(traces)}")
    kind = cfg["fit"]["kind"]
    try:
        fn = {"combined": variation.combined_stats, "c2c": variation.c2c_stats, "d2d": variation.d2d_stats}[kind]
        stats = fn(traces)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    label = args.label or traces[0].device_label
    fit = _fit_stats(stats, cfg, label)
    h = _finish(cfg, out, "characterize")
    io.write_stats(out / "stats.csv", stats, h)
    io.write_fit(out / "fit.json", fit, h)
    print(f"degree {fit.degree} fit over {stats.v_prg.size} levels; residual RMS {fit.residual_rms:.6g} uS")
    return EXIT_OK


def _fit_stats(stats, cfg, label):
    try:
        return variation.fit_polynomial(stats, cfg["fit"]["degree"], cfg["fit"]["sigma_floor"], label)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def cmd_fit(args) -> int:
    cfg = _load(args, {"degree": ("fit", "degree")})
    out = _output_dir(args, cfg)
    try:
        stats = io.read_stats(args.stats, args.read_voltage)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    fit = _fit_stats(stats, cfg, args.label or "")
    h = _finish(cfg, out, "fit")
    io.write_fit(out / "fit.json", fit, h)
    print(f"degree {fit.degree} fit; residual RMS {fit.residual_rms:.6g} uS")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args, {"framework": ("train", "framework"), "kl_weight": ("train", "kl_weight"),
                       "epochs": ("train", "epochs"), "dataset": ("dataset", "name"),
                       "subset": ("dataset", "subset")})
    out = _output_dir(args, cfg)
    fw = cfg["train"]["framework"]
    profile = None
    if fw != "det-clean":
        if not args.fit and not (fw == "det-noisy" and cfg["train"]["det_noise_std"] is not None):
            raise C.ConfigError(f"--framework {fw} requires --fit")
        if args.fit:
            profile = _profiles(cfg, [args.fit])[0]
    ds = _dataset(cfg)
    settings = _settings(cfg)
    est = make_estimator(fw, profile, settings, cfg["seed"])
    if hasattr(est, "kl_weight"):
        est.set_params(kl_weight=cfg["train"]["kl_weight"], kl_direction=cfg["train"]["kl_direction"],
                       mc_samples=cfg["train"]["mc_samples"], prior_update=cfg["train"]["prior_update"])
    h = _finish(cfg, out, "train")
    try:
        est.fit(ds.X_train, ds.y_train, X_val=ds.X_test, y_val=ds.y_test)
    except TrainingDivergedError:
        hist = getattr(est, "history_", None)
        if hist:
            io.write_metrics(out / "metrics.csv", hist, h)
        raise
    io.write_metrics(out / "metrics.csv", est.history_, h)
    io.save_checkpoint(out / "checkpoint.zip", est, fw, h, extra={
        "profile": profile.name if profile else None,
        "eval_mapping": io.mapping_to_dict(profile.mapping) if profile else None,
        "n_features": ds.n_features,
    })
    acc = evaluate_accuracy(est.mean_weights(), ds.X_test, ds.y_test, est.activation)
    print(f"{fw}: test accuracy {acc:.4f} after {cfg['train']['epochs']} epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args, {"runs": ("eval", "runs"), "dataset": ("dataset", "name"), "subset": ("dataset", "subset"),
                       "scale": ("eval", "profile_scale")})
    out = _output_dir(args, cfg)
    profiles = _profiles(cfg, args.fit)
    ds = _dataset(cfg)
    report = EvalReport(cfg["eval"]["runs"])
    used: set[str] = set()
    for path in args.checkpoint:
        try:
            ckpt = io.load_checkpoint(path)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        if ckpt.meta.get("n_features") not in (None, ds.n_features):
            raise DataError(f"{path} expects {ckpt.meta['n_features']} features, dataset has {ds.n_features}")
        label = ckpt.framework if ckpt.framework not in used else f"{ckpt.framework}:{path}"
        used.add(label)
        trained_map = ckpt.meta.get("eval_mapping")
        w = ckpt.mean_weights()
        clean = evaluate_accuracy(w, ds.X_test, ds.y_test, ckpt.activation)
        for prof in profiles:
            if trained_map is not None and io.mapping_to_dict(prof.mapping) != trained_map:
                raise C.ConfigError(f"profile {prof.name} uses a different weight mapping than {path} was trained with")
            res = noisy_inference(w, prof, ds.X_test, ds.y_test, cfg["eval"]["runs"], seed=cfg["seed"],
                                  activation=ckpt.activation, mode=cfg["eval"]["mode"])
            report.add(label, prof.name, cfg["seed"], res, clean)
            std = "" if res.std is None else f" +- {res.std:.4f}"
            print(f"{ckpt.framework} on {prof.name}: clean {clean:.4f}, noisy {res.mean:.4f}{std}")
    h = _finish(cfg, out, "eval")
    io.write_report(out / "report.csv", out / "report.json", report, h)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args, {"runs": ("eval", "runs"), "epochs": ("train", "epochs"), "dataset": ("dataset", "name"),
                       "subset": ("dataset", "subset"), "scale": ("eval", "profile_scale")})
    out = _output_dir(args, cfg)
    profiles = _profiles(cfg, args.fit)
    ds = _dataset(cfg)
    seeds = args.seeds if args.seeds else cfg["eval"]["seeds"]
    report = compare_frameworks(ds, profiles, _settings(cfg), seeds=seeds, frameworks=args.frameworks or FRAMEWORKS,
                                eval_seed=cfg["seed"])
    h = _finish(cfg, out, "compare")
    io.write_report(out / "report.csv", out / "report.json", report, h)
    for a in report.aggregates():
        print(f"{a['framework']:12s} {a['profile']:20s} noisy {a['mean']:.4f}  clean {a['clean_mean']:.4f}")
    return EXIT_OK


def cmd_dynamics(args) -> int:
    cfg = _load(args, {"epochs": ("train", "epochs"), "dataset": ("dataset", "name"),
                       "subset": ("dataset", "subset"), "scale": ("eval", "profile_scale"),
                       "metric": ("eval", "dynamics_metric")})
    out = _output_dir(args, cfg)
    profiles = _profiles(cfg, args.fit)
    if len(profiles) < 2:
        raise C.ConfigError("dynamics needs at least two --fit records")
    ds = _dataset(cfg)
    seeds = args.seeds if args.seeds else cfg["eval"]["seeds"]
    metric = cfg["eval"]["dynamics_metric"]
    curves = training_dynamics(ds, profiles, _settings(cfg), seeds=seeds, metric=metric, eval_seed=cfg["seed"])
    h = _finish(cfg, out, "dynamics")
    test_col = "noisy_test_acc" if metric == "noisy_test_acc" else "test_acc"
    io.write_dynamics(out / "dynamics.csv", curves, test_col, h)
    for c in curves:
        print(f"{c.profile} seed {c.seed}: converged at epoch {c.convergence_epoch}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./fefet_bnn_out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker processes / BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fefet-bnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo device campaigns -> trace CSVs")
    p.add_argument("--devices", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--mode", choices=["combined", "d2d", "c2c"])
    p.add_argument("--read-voltage", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("characterize", parents=[common], help="traces -> variation stats + polynomial fit")
    p.add_argument("--traces", required=True, help="trace CSV file or directory")
    p.add_argument("--degree", type=int)
    p.add_argument("--kind", choices=["combined", "c2c", "d2d"])
    p.add_argument("--label")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("fit", parents=[common], help="stats CSV -> polynomial fit record")
    p.add_argument("--stats", required=True)
    p.add_argument("--degree", type=int)
    p.add_argument("--read-voltage", type=float, default=1.2)
    p.add_argument("--label")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", parents=[common], help="train one framework -> checkpoint + metrics")
    p.add_argument("--framework", choices=FRAMEWORKS)
    p.add_argument("--fit", help="variation fit record")
    p.add_argument("--kl-weight", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset")
    p.add_argument("--subset", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="noisy inference of checkpoints under variation profiles")
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--fit", nargs="+", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--dataset")
    p.add_argument("--subset", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="train and evaluate all frameworks")
    p.add_argument("--fit", nargs="+", required=True)
    p.add_argument("--frameworks", nargs="+", choices=FRAMEWORKS)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--dataset")
    p.add_argument("--subset", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("dynamics", parents=[common], help="per-epoch accuracy curves under several profiles")
    p.add_argument("--fit", nargs="+", required=True)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--metric", choices=["test_acc", "train_acc", "noisy_test_acc"])
    p.add_argument("--dataset")
    p.add_argument("--subset", type=int)
    p.set_defaults(func=cmd_dynamics)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads:
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # invalid parameter combinations surface as ValueError from the library
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
