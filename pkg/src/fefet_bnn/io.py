"""File formats: trace/stats CSV, fit records, checkpoints, metrics and reports.

Every writer is deterministic (no timestamps) and atomic (temp file then
rename). CSV files may begin with ``#`` comment lines carrying the hash of
the resolved configuration that produced them; readers skip those lines.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .device import ConductanceTrace
from .mapping import MappingConfig
from .variation import VariationFit, VariationStats

TRACE_HEADER = ["device_label", "cycle", "read_voltage", "v_prg", "conductance_us"]
STATS_HEADER = ["v_prg", "mu_us", "sigma_us", "n"]
METRICS_HEADER = ["epoch", "likelihood", "kl", "total", "train_acc", "test_acc"]
REPORT_HEADER = ["framework", "profile", "run", "accuracy", "seed"]
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x) -> str:
    # repr round-trips floats exactly
    return repr(float(x))


def _csv_text(header, rows, config_hash: Optional[str] = None) -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path, header) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    missing = set(header) - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return list(reader)


# ---------------------------------------------------------------------------
# traces and stats


def traces_to_csv(traces: Sequence[ConductanceTrace], config_hash: Optional[str] = None) -> str:
    rows = [
        [t.device_label, t.cycle_index, _num(t.read_voltage), _num(v), _num(g)]
        for t in traces
        for v, g in zip(t.v_prg, t.conductance)
    ]
    return _csv_text(TRACE_HEADER, rows, config_hash)


def write_traces(path, traces: Sequence[ConductanceTrace], config_hash: Optional[str] = None):
    atomic_write(path, traces_to_csv(traces, config_hash))


def read_traces(path) -> list[ConductanceTrace]:
    """Read traces in file order; measured data in the same schema loads identically."""
    groups: dict[tuple, list] = {}
    for row in _read_csv(path, TRACE_HEADER):
        key = (row["device_label"], int(row["cycle"]), float(row["read_voltage"]))
        groups.setdefault(key, []).append((float(row["v_prg"]), float(row["conductance_us"])))
    out = []
    for (label, cycle, vr), pts in groups.items():
        pts.sort()
        v, g = zip(*pts)
        out.append(ConductanceTrace(label, cycle, vr, np.array(v), np.array(g)))
    return out


def write_stats(path, stats: VariationStats, config_hash: Optional[str] = None):
    rows = [[_num(v), _num(m), _num(s), int(n)] for v, m, s, n in stats.levels]
    atomic_write(path, _csv_text(STATS_HEADER, rows, config_hash))


def read_stats(path, read_voltage: float = float("nan")) -> VariationStats:
    rows = _read_csv(path, STATS_HEADER)
    cols = {k: np.array([float(r[k]) for r in rows]) for k in STATS_HEADER}
    return VariationStats(read_voltage, cols["v_prg"], cols["mu_us"], cols["sigma_us"], cols["n"].astype(int))


# ---------------------------------------------------------------------------
# fits


def fit_to_dict(fit: VariationFit) -> dict:
    return {
        "device_label": fit.device_label,
        "read_voltage": fit.read_voltage,
        "degree": fit.degree,
        "coefficients": [float(c) for c in fit.coefficients],
        "mu_range": [float(fit.mu_range[0]), float(fit.mu_range[1])],
        "residual_rms": float(fit.residual_rms),
        "sigma_floor": float(fit.sigma_floor),
        "scale": float(fit.scale),
    }


def fit_from_dict(d: dict) -> VariationFit:
    coef = np.array(d["coefficients"], dtype=float)
    if "degree" in d and int(d["degree"]) != coef.size - 1:
        raise ValueError("fit record degree does not match its coefficient count")
    return VariationFit(coef, float(d["read_voltage"]), d.get("device_label", ""), tuple(d["mu_range"]),
                        float(d.get("residual_rms", 0.0)), float(d.get("sigma_floor", 1e-4)),
                        float(d.get("scale", 1.0)))


def write_fit(path, fit: VariationFit, config_hash: Optional[str] = None):
    d = fit_to_dict(fit)
    if config_hash:
        d["config_hash"] = config_hash
    # json writes floats with repr, so coefficients keep full precision
    atomic_write(path, json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_fit(path) -> VariationFit:
    return fit_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def mapping_to_dict(cfg: Optional[MappingConfig]) -> Optional[dict]:
    if cfg is None:
        return None
    return {"g_min": cfg.g_min, "g_max": cfg.g_max, "w_min": cfg.w_min, "w_max": cfg.w_max,
            "sigma_mode": cfg.sigma_mode}


def mapping_from_dict(d: Optional[dict]) -> Optional[MappingConfig]:
    return None if d is None else MappingConfig(**d)


# ---------------------------------------------------------------------------
# checkpoints


def _zip_bytes(entries: dict[str, bytes]) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])
    return buf.getvalue()


def _npy(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, model, framework: str, config_hash: Optional[str] = None, extra: Optional[dict] = None):
    """Write a fitted classifier to a versioned zip of ``.npy`` arrays plus ``meta.json``."""
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "version": CHECKPOINT_VERSION,
        "framework": framework,
        "activation": model.activation,
        "classes": [int(c) if isinstance(c, (np.integer, int)) else str(c) for c in model.classes_],
        "params": {k: v for k, v in model.get_params().items() if k not in ("variation_fit", "mapping")},
        "config_hash": config_hash,
    }
    if extra:
        meta.update(extra)
    if hasattr(model, "network_"):
        net = model.network_
        meta["kind"] = "variational"
        meta["shapes"] = [list(layer.shape) for layer in net.layers]
        meta["epoch"] = model.epochs_trained_
        meta["fit"] = fit_to_dict(model.variation_fit) if model.variation_fit is not None else None
        meta["mapping"] = mapping_to_dict(model.mapping)
        meta["sigma_f"] = getattr(model, "sigma_f_", None)
        for i, layer in enumerate(net.layers):
            for name in ("mu_w", "rho_w", "mu_b", "rho_b", "prior_mu_w", "prior_sigma_w", "prior_mu_b",
                         "prior_sigma_b"):
                arrays[f"layer{i}/{name}"] = getattr(layer, name)
        opt = getattr(net, "_optimizer", None)
        if opt is not None:
            meta["optimizer_t"] = opt.t
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                for k in m:
                    arrays[f"adam/m{i}/{k}"] = m[k]
                    arrays[f"adam/v{i}/{k}"] = v[k]
    else:
        meta["kind"] = "plain"
        meta["shapes"] = [list(W.shape) for W, _ in model.weights_]
        meta["epoch"] = model.epochs
        for i, (W, b) in enumerate(model.weights_):
            arrays[f"layer{i}/W"] = W
            arrays[f"layer{i}/b"] = b
    meta["history"] = [h.as_dict() for h in model.history_]
    entries = {f"{k}.npy": _npy(v) for k, v in arrays.items()}
    entries["meta.json"] = json.dumps(meta, indent=2, sort_keys=True, default=_json_default).encode()
    atomic_write(path, _zip_bytes(entries))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, np.ndarray)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


class Checkpoint:
    """Loaded checkpoint: metadata plus the deployable mean weights."""

    def __init__(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.meta = meta
        self.arrays = arrays

    @property
    def framework(self) -> str:
        return self.meta["framework"]

    @property
    def activation(self) -> str:
        return self.meta["activation"]

    @property
    def mapping(self) -> Optional[MappingConfig]:
        return mapping_from_dict(self.meta.get("mapping"))

    @property
    def fit(self) -> Optional[VariationFit]:
        f = self.meta.get("fit")
        return None if f is None else fit_from_dict(f)

    def mean_weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        n = len(self.meta["shapes"])
        if self.meta["kind"] == "variational":
            return [(self.arrays[f"layer{i}/mu_w"], self.arrays[f"layer{i}/mu_b"]) for i in range(n)]
        return [(self.arrays[f"layer{i}/W"], self.arrays[f"layer{i}/b"]) for i in range(n)]


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arrays = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    return Checkpoint(meta, arrays)


# ---------------------------------------------------------------------------
# metrics and reports


def write_metrics(path, history, config_hash: Optional[str] = None):
    rows = [[h.epoch, _num(h.likelihood), _num(h.kl), _num(h.total), _num(h.train_acc), _num(h.test_acc)]
            for h in history]
    atomic_write(path, _csv_text(METRICS_HEADER, rows, config_hash))


def write_report(csv_path, json_path, report, config_hash: Optional[str] = None):
    rows = [[r["framework"], r["profile"], r["run"], _num(r["accuracy"]), r["seed"]] for r in report.rows]
    atomic_write(csv_path, _csv_text(REPORT_HEADER, rows, config_hash))
    payload = json.loads(report.to_json())
    payload["config_hash"] = config_hash
    atomic_write(json_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_dynamics(path, curves, test_column: str = "test_acc", config_hash: Optional[str] = None):
    """Epoch-indexed accuracy curves, one block of rows per (profile, seed)."""
    header = ["profile", "seed", "epoch", "train_acc", test_column, "convergence_epoch"]
    rows = [[c.profile, c.seed, e, _num(tr), _num(te), c.convergence_epoch]
            for c in curves for e, (tr, te) in enumerate(zip(c.train_acc, c.test_acc))]
    atomic_write(path, _csv_text(header, rows, config_hash))


def read_report_rows(path) -> list[dict]:
    return [
        {"framework": r["framework"], "profile": r["profile"], "run": int(r["run"]),
         "accuracy": float(r["accuracy"]), "seed": int(r["seed"])}
        for r in _read_csv(path, REPORT_HEADER)
    ]
