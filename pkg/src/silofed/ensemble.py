"""Model-sharing ensembles: independent per-silo models, averaged at prediction time.

Rank 1 is the training silo nearest to the query.  A raw rank used as a weight
would favour the *furthest* silo, so ranks are turned into weights that shrink
with distance: ``1 / rank`` (``inverse_rank``) or ``|K| - rank + 1``
(``linear_reversed``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from silofed import nncore, privacy
from silofed.data import GeoPoint, NormStats, SiloDataset, haversine_km
from silofed.federation import TrainConfig, train_centralized
from silofed.nncore import ModelSpec, ParameterSet
from silofed.privacy import PrivacySpec

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

WEIGHT_MODES = ("uniform", "distance_rank")
RANK_TO_WEIGHT = ("inverse_rank", "linear_reversed")


@dataclass(frozen=True)
class ModelBundle:
    """One silo's trained model plus what is needed to use it elsewhere.

    ``norm_stats`` are the statistics the model was trained under; queries
    from other silos are normalized with these, never with their own.
    """

    silo_id: str
    params: ParameterSet
    train_location: GeoPoint
    norm_stats: Optional[NormStats] = None
    epsilon: float = 0.0

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if self.norm_stats is not None:
            x = (x - self.norm_stats.mean) / self.norm_stats.std
        return nncore.predict(self.params, x)


@dataclass(frozen=True)
class RankWeighting:
    mode: str = "distance_rank"
    rank_to_weight: str = "inverse_rank"

    def __post_init__(self) -> None:
        if self.mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weighting mode {self.mode!r}")
        if self.rank_to_weight not in RANK_TO_WEIGHT:
            raise ValueError(f"unknown rank_to_weight {self.rank_to_weight!r}")


def train_local(
    train: SiloDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    dp: Optional[PrivacySpec] = None,
    val: Optional[SiloDataset] = None,
    norm_stats: Optional[NormStats] = None,
) -> ModelBundle:
    """Train one silo's model on raw features normalized by ``norm_stats``.

    With early stopping enabled, ``val`` (the silo's own validation split)
    selects the returned epoch.
    """
    if len(train) == 0:
        raise ValueError(f"silo {train.silo_id!r}: empty training split")
    if norm_stats is not None:
        train = norm_stats.apply(train)
        val = norm_stats.apply(val) if val is not None else None
    if val is not None and len(val) == 0:
        val = None
    result = train_centralized(train, spec, cfg, dp, val)
    eps = 0.0
    if dp is not None:
        eps = privacy.epsilon(result.accountants[train.silo_id], dp.delta)
    return ModelBundle(train.silo_id, result.params, train.location, norm_stats, eps)


def _check_bundles(bundles: Sequence[ModelBundle]) -> List[ModelBundle]:
    if not bundles:
        raise ValueError("ensemble needs at least one bundle")
    ids = [b.silo_id for b in bundles]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate silo ids in ensemble: {sorted(ids)}")
    ref = bundles[0].params.structure()
    for b in bundles[1:]:
        if b.params.structure() != ref:
            raise ValueError(f"bundle {b.silo_id!r} has a different parameter structure")
    return sorted(bundles, key=lambda b: b.silo_id)


def rank_distances(query: GeoPoint, bundles: Sequence[ModelBundle]) -> Dict[str, int]:
    """Rank bundles by great-circle distance to ``query``; ties go to the smaller silo id."""
    ordered = _check_bundles(bundles)
    dist = [(haversine_km(query, b.train_location), b.silo_id) for b in ordered]
    return {sid: r for r, (_, sid) in enumerate(sorted(dist), start=1)}


def ensemble_weights(query: GeoPoint, bundles: Sequence[ModelBundle], weighting: RankWeighting) -> Dict[str, float]:
    """Normalized weights keyed by silo id."""
    ordered = _check_bundles(bundles)
    k = len(ordered)
    if weighting.mode == "uniform":
        raw = np.ones(k)
    else:
        ranks = rank_distances(query, ordered)
        r = np.array([ranks[b.silo_id] for b in ordered], dtype=np.float64)
        raw = 1.0 / r if weighting.rank_to_weight == "inverse_rank" else (k - r + 1.0)
    w = raw / raw.sum()
    return {b.silo_id: float(v) for b, v in zip(ordered, w)}


def _input_dim(params: ParameterSet) -> int:
    first = next(n for n in params.names if n.endswith(".weight"))
    return params[first].shape[0]


def _combine(preds: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # preds: (K, n) in canonical silo order
    if preds.shape[0] == 1:
        return preds[0].copy()
    out = weights[0] * preds[0]
    for k in range(1, preds.shape[0]):
        out = out + weights[k] * preds[k]
    return out


def predict_ensemble_many(
    features: np.ndarray, query: GeoPoint, bundles: Sequence[ModelBundle], weighting: RankWeighting
) -> np.ndarray:
    ordered = _check_bundles(bundles)
    x = np.asarray(features, dtype=np.float64)
    dim = _input_dim(ordered[0].params)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"features have shape {x.shape}, expected (n, {dim})")
    w = ensemble_weights(query, ordered, weighting)
    preds = np.stack([b.predict(x) for b in ordered])
    return _combine(preds, np.array([w[b.silo_id] for b in ordered]))


def predict_ensemble(x: np.ndarray, query: GeoPoint, bundles: Sequence[ModelBundle], weighting: RankWeighting) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected one feature vector, got shape {x.shape}")
    return float(predict_ensemble_many(x[None, :], query, bundles, weighting)[0])


def evaluate_ensemble(
    bundles: Sequence[ModelBundle], test_silos: Sequence[SiloDataset], weighting: RankWeighting
) -> Dict[str, float]:
    """Per-silo RMSE, each silo's location serving as the query for its records."""
    if not test_silos:
        raise ValueError("no test silos")
    out = {}
    for s in test_silos:
        if len(s) == 0:
            raise ValueError(f"silo {s.silo_id!r}: empty test split")
        preds = predict_ensemble_many(s.features, s.location, bundles, weighting)
        out[s.silo_id] = nncore.rmse(preds, s.targets)
    return out


def write_manifest(bundles: Sequence[ModelBundle], directory: "str | Path", config_hash: str = "") -> Path:
    """Checkpoints under ``checkpoints/`` plus a JSON manifest describing them."""
    directory = Path(directory)
    ckpt_dir = directory / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for b in _check_bundles(bundles):
        rel = f"checkpoints/{b.silo_id}.ckpt"
        nncore.save_params(b.params, directory / rel)
        entries.append(
            {
                "silo_id": b.silo_id,
                "checkpoint": rel,
                "location": {"lat": b.train_location.lat, "lon": b.train_location.lon},
                "norm_stats": b.norm_stats.to_dict() if b.norm_stats is not None else None,
                "epsilon": b.epsilon,
            }
        )
    path = directory / MANIFEST_NAME
    doc = {"version": MANIFEST_VERSION, "config_hash": config_hash, "bundles": entries}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(directory: "str | Path") -> Tuple[List[ModelBundle], str]:
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() else directory
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    bundles = []
    for e in doc["bundles"]:
        stats = NormStats.from_dict(e["norm_stats"]) if e.get("norm_stats") is not None else None
        params = nncore.load_params(path.parent / e["checkpoint"])
        loc = GeoPoint(e["location"]["lat"], e["location"]["lon"])
        bundles.append(ModelBundle(e["silo_id"], params, loc, stats, float(e.get("epsilon", 0.0))))
    return bundles, doc.get("config_hash", "")


def mean_rmse(per_silo: Mapping[str, float]) -> float:
    vals = list(per_silo.values())
    return math.fsum(vals) / len(vals) if vals else math.nan
