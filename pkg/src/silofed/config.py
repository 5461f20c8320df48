"""TOML run configuration with strict key checking.

Every key has a declared type; unknown keys and type mismatches raise
:class:`ConfigError` carrying the dotted key path.  Section layout::

    seeds, years, regimes, threads
    [data]        synthetic generator or CSV source, normalization, val_fraction
    [model]       hidden widths, batch_norm
    [train]       single-model regimes (epochs, batch_size, lr schedule, early stopping)
    [federation]  rounds, fraction, local_epochs, batch_size, lr schedule, aggregation
    [privacy]     clip_norm, noise_multiplier, delta, epsilon_budget
    [ensemble]    weighting, rank_to_weight
    [sweep]       budgets, year
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from silofed import data
from silofed.data import ShiftSpec, SiloDataset
from silofed.ensemble import RankWeighting
from silofed.federation import FedConfig, LRSchedule, TrainConfig
from silofed.harness import REGIMES, ExperimentConfig
from silofed.nncore import ModelSpec
from silofed.privacy import PrivacySpec


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


INT, FLOAT, BOOL, STR = "int", "float", "bool", "str"
INTS, FLOATS, STRS = "list[int]", "list[float]", "list[str]"

_LR = {"lr": FLOAT, "decay_epochs": INTS, "decay_factor": FLOAT}

SCHEMA: Dict[str, Any] = {
    "seeds": INTS,
    "years": INTS,
    "regimes": STRS,
    "threads": INT,
    "data": {
        "source": STR,
        "path": STR,
        "feature_columns": STRS,
        "n_silos": INT,
        "per_silo_n": INT,
        "feature_dim": INT,
        "geo_layout": STR,
        "seed": INT,
        "first_year": INT,
        "last_year": INT,
        "scale_spread": FLOAT,
        "offset_spread": FLOAT,
        "concept_magnitude": FLOAT,
        "noise_std": FLOAT,
        "normalization": STR,
        "val_fraction": FLOAT,
    },
    "model": {"hidden": INTS, "batch_norm": BOOL},
    "train": {"epochs": INT, "batch_size": INT, "early_stopping": BOOL, "patience": INT, **_LR},
    "federation": {
        "rounds": INT,
        "fraction": FLOAT,
        "local_epochs": INT,
        "batch_size": INT,
        "aggregation": STR,
        "early_stopping": BOOL,
        "patience": INT,
        **_LR,
    },
    "privacy": {"clip_norm": FLOAT, "noise_multiplier": FLOAT, "delta": FLOAT, "epsilon_budget": FLOAT},
    "ensemble": {"weighting": STR, "rank_to_weight": STR},
    "sweep": {"budgets": FLOATS, "year": INT},
}


def _check_type(key: str, value: Any, kind: str) -> Any:
    def scalar(v: Any, k: str) -> Any:
        if k == INT:
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(key, f"expected an integer, got {v!r}")
            return v
        if k == FLOAT:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(key, f"expected a number, got {v!r}")
            return float(v)
        if k == BOOL:
            if not isinstance(v, bool):
                raise ConfigError(key, f"expected true or false, got {v!r}")
            return v
        if not isinstance(v, str):
            raise ConfigError(key, f"expected a string, got {v!r}")
        return v

    if kind.startswith("list["):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        inner = kind[5:-1]
        return [scalar(v, inner) for v in value]
    return scalar(value, kind)


def validate(doc: Mapping[str, Any], schema: Mapping[str, Any] = SCHEMA, prefix: str = "") -> Dict[str, Any]:
    """Type-check ``doc`` against ``schema``; unknown keys are errors."""
    out: Dict[str, Any] = {}
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(path, "unknown key")
        kind = schema[key]
        if isinstance(kind, dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a table")
            out[key] = validate(value, kind, path + ".")
        else:
            out[key] = _check_type(path, value, kind)
    return out


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    seeds: List[int]
    years: List[int]
    regimes: List[str]
    threads: int = 1
    data: Dict[str, Any] = field(default_factory=dict)
    budgets: List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    sweep_year: Optional[int] = None
    base_dir: Path = Path(".")


_ALIASES = {"decay_points": "decay_epochs", "base": "lr", "mode": "weighting", "hidden_layers": "hidden"}


def _build(section: str, fn, **kwargs):
    """Construct a config object; a value error is reported under the key it names."""
    try:
        return fn(**kwargs)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        named = [k for k in kwargs if msg.startswith(k) or f" {k} " in f" {msg} "]
        key = f"{section}.{_ALIASES.get(named[0], named[0])}" if len(named) == 1 else section
        raise ConfigError(key, msg) from exc


def _lr(section: str, d: Mapping[str, Any], default: LRSchedule) -> LRSchedule:
    return _build(
        section,
        LRSchedule,
        base=d.get("lr", default.base),
        decay_points=tuple(d.get("decay_epochs", default.decay_points)),
        decay_factor=d.get("decay_factor", default.decay_factor),
    )


DATA_DEFAULTS = {
    "source": "synthetic",
    "n_silos": 9,
    "per_silo_n": 2000,
    "feature_dim": 8,
    "geo_layout": "grid",
    "seed": 0,
    "first_year": 2009,
    "last_year": 2015,
    "scale_spread": 0.07,
    "offset_spread": 0.15,
    "concept_magnitude": 0.05,
    "noise_std": 2.5,
    "normalization": "per_silo",
    "val_fraction": 0.15,
}


def parse(doc: Mapping[str, Any], base_dir: "str | Path" = ".") -> RunConfig:
    doc = validate(doc)
    d = {**DATA_DEFAULTS, **doc.get("data", {})}
    if d["source"] not in ("synthetic", "csv"):
        raise ConfigError("data.source", f"expected 'synthetic' or 'csv', got {d['source']!r}")
    if d["source"] == "csv" and "path" not in d:
        raise ConfigError("data.path", "required when data.source = 'csv'")

    m = doc.get("model", {})
    widths = m.get("hidden", [32, 16])
    bn = m.get("batch_norm", True)
    input_dim = d["feature_dim"] if d["source"] == "synthetic" else len(d["feature_columns"]) if "feature_columns" in d else None
    hidden = tuple((w, bn) for w in widths)

    t = doc.get("train", {})
    tdef = TrainConfig(epochs=40, lr=LRSchedule(0.01, (20, 30)), patience=20)
    train = _build(
        "train",
        TrainConfig,
        epochs=t.get("epochs", tdef.epochs),
        batch_size=t.get("batch_size", tdef.batch_size),
        lr=_lr("train", t, tdef.lr),
        early_stopping=t.get("early_stopping", tdef.early_stopping),
        patience=t.get("patience", tdef.patience),
    )
    f = doc.get("federation", {})
    fed = _build(
        "federation",
        FedConfig,
        rounds=f.get("rounds", 20),
        fraction=f.get("fraction", 1.0),
        local_epochs=f.get("local_epochs", 2),
        batch_size=f.get("batch_size", 32),
        lr=_lr("federation", f, tdef.lr),
        aggregation=f.get("aggregation", "fedbn"),
        early_stopping=f.get("early_stopping", True),
        patience=f.get("patience", 10),
    )
    privacy = None
    if "privacy" in doc:
        p = doc["privacy"]
        privacy = _build(
            "privacy",
            PrivacySpec,
            clip_norm=p.get("clip_norm", 10.0),
            noise_multiplier=p.get("noise_multiplier", 1.4),
            delta=p.get("delta", 1e-5),
            epsilon_budget=p.get("epsilon_budget", 8.0),
        )
    e = doc.get("ensemble", {})
    weighting = _build("ensemble", RankWeighting, mode=e.get("weighting", "distance_rank"), rank_to_weight=e.get("rank_to_weight", "inverse_rank"))

    default_regimes = [r for r in REGIMES if privacy is not None or not r.endswith("_ldp")]
    regimes = doc.get("regimes", default_regimes)
    for i, r in enumerate(regimes):
        if r not in REGIMES:
            raise ConfigError(f"regimes[{i}]", f"unknown regime {r!r}; expected one of {list(REGIMES)}")
        if r.endswith("_ldp") and privacy is None:
            raise ConfigError("privacy", f"regime {r} needs a [privacy] section")
    seeds = doc.get("seeds", [0])
    years = doc.get("years", [d["last_year"]])
    if not seeds:
        raise ConfigError("seeds", "must be nonempty")
    if not years:
        raise ConfigError("years", "must be nonempty")
    threads = doc.get("threads", 1)
    if threads < 1:
        raise ConfigError("threads", "must be >= 1")

    # the model input width is known only after loading a CSV
    spec = _build("model", ModelSpec, input_dim=input_dim or 1, hidden_layers=hidden)
    experiment = _build(
        "data",
        ExperimentConfig,
        model=spec,
        train=train,
        fed=fed,
        privacy=privacy,
        weighting=weighting,
        normalization=d["normalization"],
        val_fraction=d["val_fraction"],
    )
    s = doc.get("sweep", {})
    budgets = s.get("budgets", [1.0, 2.0, 4.0, 8.0, 16.0])
    if not budgets or any(not b > 0 for b in budgets) or budgets != sorted(budgets):
        raise ConfigError("sweep.budgets", "must be positive and ascending")
    return RunConfig(experiment, seeds, years, regimes, threads, d, budgets, s.get("year"), Path(base_dir))


def load(path: "str | Path") -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"{path}: {exc}") from exc
    return parse(doc, path.parent)


def load_silos(cfg: RunConfig, csv_path: "str | Path | None" = None) -> Tuple[List[SiloDataset], RunConfig]:
    """Materialise the configured silos; the model input width follows the data."""
    d = cfg.data
    if csv_path is not None or d["source"] == "csv":
        path = Path(csv_path) if csv_path is not None else cfg.base_dir / d["path"]
        cols = d.get("feature_columns") or _infer_feature_columns(path)
        silos, _ = data.load_csv(path, data.CsvSchema(tuple(cols)))
        dim = len(cols)
    else:
        dim = d["feature_dim"]
        shift = ShiftSpec.draw(
            d["n_silos"],
            dim,
            scale_spread=d["scale_spread"],
            offset_spread=d["offset_spread"],
            concept_magnitude=d["concept_magnitude"],
            noise_std=d["noise_std"],
            seed=d["seed"],
        )
        silos = data.generate_silos(
            d["n_silos"], d["per_silo_n"], dim, shift, d["geo_layout"], d["seed"], (d["first_year"], d["last_year"])
        )
    if cfg.experiment.model.input_dim != dim:
        spec = ModelSpec(dim, cfg.experiment.model.hidden_layers)
        cfg = RunConfig(**{**cfg.__dict__, "experiment": replace(cfg.experiment, model=spec)})
    return silos, cfg


def _infer_feature_columns(path: Path) -> List[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    reserved = {"silo", "lat", "lon", "year", "yield"}
    cols = [c for c in header if c not in reserved]
    if not cols:
        raise ConfigError("data.feature_columns", f"{path}: no feature columns found in header")
    return cols
