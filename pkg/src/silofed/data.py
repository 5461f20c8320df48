"""Silo datasets: synthetic generation, CSV ingestion, splitting, featurization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from silofed._rng import keyed_rng
from silofed.nncore import Batch

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088

# Bounding box used for synthetic silo placement (roughly the US corn belt).
LAT_RANGE = (37.0, 47.0)
LON_RANGE = (-100.0, -82.0)

YIELD_BASELINE = 45.0
YIELD_SCALE = 6.0

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in kilometres."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


@dataclass
class SiloDataset:
    """Records held by one silo, stored column-wise.

    ``features`` is ``[n, d]``, ``targets`` and ``years`` are length ``n``.
    """

    silo_id: str
    location: GeoPoint
    features: np.ndarray
    targets: np.ndarray
    years: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1) if self.features.size else self.features.reshape(0, 0)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        self.years = np.asarray(self.years, dtype=np.int64).reshape(-1)
        n = self.features.shape[0]
        if self.targets.shape[0] != n or self.years.shape[0] != n:
            raise ValueError(f"silo {self.silo_id}: column lengths disagree")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise ValueError(f"silo {self.silo_id}: non-finite features or targets")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "SiloDataset":
        return replace(
            self,
            features=self.features[index],
            targets=self.targets[index],
            years=self.years[index],
        )

    def with_features(self, features: np.ndarray) -> "SiloDataset":
        return replace(self, features=features)

    def records(self) -> Iterator[Tuple[np.ndarray, float, int]]:
        for x, y, yr in zip(self.features, self.targets, self.years):
            yield x, float(y), int(yr)

    def batch(self) -> Batch:
        return Batch(self.features, self.targets)


def concat_silos(silos: Sequence[SiloDataset], silo_id: Optional[str] = None) -> SiloDataset:
    """Pool several silos into one dataset (location taken from the first)."""
    if not silos:
        raise ValueError("nothing to concatenate")
    if silo_id is None:
        silo_id = silos[0].silo_id if len(silos) == 1 else "pooled"
    return SiloDataset(
        silo_id,
        silos[0].location,
        np.concatenate([s.features for s in silos]),
        np.concatenate([s.targets for s in silos]),
        np.concatenate([s.years for s in silos]),
    )


# -- synthetic generator ----------------------------------------------------


@dataclass
class ShiftSpec:
    """Per-silo heterogeneity of a synthetic federation.

    ``scales``/``offsets`` are ``[n_silos, d]`` affine measurement maps applied
    to the latent features (``None`` means identity).  ``concept_magnitude``
    scales the spatially correlated perturbation of the label coefficients.
    """

    scales: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None
    concept_magnitude: float = 0.0
    noise_std: float = 1.0

    def __post_init__(self) -> None:
        if self.concept_magnitude < 0:
            raise ValueError("concept_magnitude must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.scales is not None:
            self.scales = np.asarray(self.scales, dtype=np.float64)
            if np.any(self.scales <= 0):
                raise ValueError("covariate scales must be > 0")
        if self.offsets is not None:
            self.offsets = np.asarray(self.offsets, dtype=np.float64)

    @classmethod
    def draw(
        cls,
        n_silos: int,
        feature_dim: int,
        *,
        scale_spread: float = 0.0,
        offset_spread: float = 0.0,
        concept_magnitude: float = 0.0,
        noise_std: float = 1.0,
        seed: int = 0,
    ) -> "ShiftSpec":
        """Random covariate maps: log-normal scales and Gaussian offsets."""
        rng = keyed_rng(seed, "covariate-shift")
        scales = np.exp(scale_spread * rng.standard_normal((n_silos, feature_dim)))
        offsets = offset_spread * rng.standard_normal((n_silos, feature_dim))
        return cls(scales, offsets, concept_magnitude, noise_std)


def silo_locations(n_silos: int, layout: str, seed: int) -> List[GeoPoint]:
    if layout == "grid":
        cols = math.ceil(math.sqrt(n_silos))
        rows = math.ceil(n_silos / cols)
        pts = []
        for k in range(n_silos):
            r, c = divmod(k, cols)
            lat = LAT_RANGE[0] + (r + 0.5) * (LAT_RANGE[1] - LAT_RANGE[0]) / rows
            lon = LON_RANGE[0] + (c + 0.5) * (LON_RANGE[1] - LON_RANGE[0]) / cols
            pts.append(GeoPoint(lat, lon))
        return pts
    if layout == "random":
        rng = keyed_rng(seed, "layout")
        lats = rng.uniform(*LAT_RANGE, n_silos)
        lons = rng.uniform(*LON_RANGE, n_silos)
        return [GeoPoint(float(a), float(b)) for a, b in zip(lats, lons)]
    raise ValueError(f"unknown geo layout {layout!r}")


def _spatial_field(points: Sequence[GeoPoint], n_fields: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian-process samples at ``points`` (squared-exponential kernel).

    Length scale is half the largest pairwise great-circle distance.
    """
    k = len(points)
    dist = np.array([[haversine_km(a, b) for b in points] for a in points])
    length = max(dist.max() / 2.0, 1e-9)
    cov = np.exp(-0.5 * (dist / length) ** 2)
    # eigh tolerates the near-singular kernels of tight layouts
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return root @ rng.standard_normal((k, n_fields))


@dataclass
class GroundTruth:
    """Label function ``baseline + scale * (beta.z + gamma*z1*z2 + kappa*sin(z3))``."""

    beta: np.ndarray
    gamma: float
    kappa: float

    def __call__(self, z: np.ndarray) -> np.ndarray:
        g = z @ self.beta + self.gamma * z[:, 0] * z[:, 1] + self.kappa * np.sin(z[:, 2])
        return YIELD_BASELINE + YIELD_SCALE * g


def ground_truths(
    n_silos: int, feature_dim: int, locations: Sequence[GeoPoint], magnitude: float, seed: int
) -> List[GroundTruth]:
    rng = keyed_rng(seed, "truth")
    beta = rng.standard_normal(feature_dim) / math.sqrt(feature_dim)
    gamma = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
    kappa = rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 1.5)
    pert = np.zeros((n_silos, feature_dim + 2))
    if magnitude > 0:
        pert = magnitude * _spatial_field(locations, feature_dim + 2, keyed_rng(seed, "concept"))
    return [
        GroundTruth(beta + pert[k, :feature_dim] / math.sqrt(feature_dim), gamma + pert[k, -2], kappa + pert[k, -1])
        for k in range(n_silos)
    ]


def generate_silos(
    n_silos: int,
    per_silo_n: int,
    feature_dim: int,
    shift: ShiftSpec,
    geo_layout: str = "grid",
    seed: int = 0,
    years: Tuple[int, int] = (2009, 2015),
) -> List[SiloDataset]:
    """Synthetic federation with covariate (measurement) and concept shift.

    Latent features are standard normal; each silo observes them through its
    affine map ``x = scale * z + offset``.  Targets are computed from the
    latent features with the silo's perturbed coefficients plus Gaussian
    noise, so measurement differences do not change the underlying yield.
    Years cycle round-robin over the inclusive range ``years``.
    """
    if n_silos < 2:
        raise ValueError("need at least 2 silos")
    if per_silo_n < 10:
        raise ValueError("need at least 10 records per silo")
    if feature_dim < 3:
        raise ValueError("feature_dim must be >= 3 (label uses an interaction and a sinusoid)")
    if years[1] < years[0]:
        raise ValueError(f"empty year range {years}")
    for name, arr in (("scales", shift.scales), ("offsets", shift.offsets)):
        if arr is not None and arr.shape != (n_silos, feature_dim):
            raise ValueError(f"shift {name} must have shape {(n_silos, feature_dim)}, got {arr.shape}")
    locations = silo_locations(n_silos, geo_layout, seed)
    truths = ground_truths(n_silos, feature_dim, locations, shift.concept_magnitude, seed)
    n_years = years[1] - years[0] + 1
    year_col = years[0] + np.arange(per_silo_n) % n_years
    silos = []
    for k in range(n_silos):
        silo_id = f"silo{k:02d}"
        rng = keyed_rng(seed, "silo", silo_id)
        z = rng.standard_normal((per_silo_n, feature_dim))
        y = truths[k](z) + shift.noise_std * rng.standard_normal(per_silo_n)
        x = z
        if shift.scales is not None:
            x = x * shift.scales[k]
        if shift.offsets is not None:
            x = x + shift.offsets[k]
        silos.append(SiloDataset(silo_id, locations[k], x, y, year_col.copy()))
    return silos


# -- CSV ingestion ----------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: Tuple[str, ...]
    target_column: str = "yield"
    year_column: str = "year"
    silo_column: str = "silo"
    lat_column: str = "lat"
    lon_column: str = "lon"

    def columns(self) -> List[str]:
        return [
            self.silo_column,
            self.lat_column,
            self.lon_column,
            self.year_column,
            self.target_column,
            *self.feature_columns,
        ]


def default_schema(feature_dim: int) -> CsvSchema:
    return CsvSchema(tuple(f"f{i}" for i in range(feature_dim)))


@dataclass
class LoadReport:
    kept: Dict[str, int] = field(default_factory=dict)
    dropped: Dict[str, int] = field(default_factory=dict)

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())

    @property
    def total_kept(self) -> int:
        return sum(self.kept.values())

    def as_record(self) -> dict:
        return {"event": "csv_load", "kept": dict(self.kept), "dropped": dict(self.dropped)}


class SchemaError(ValueError):
    pass


def _finite(text: str) -> Optional[float]:
    try:
        v = float(text)
    except (TypeError, ValueError):
        return None
    return v if math.isfinite(v) else None


def load_csv(path: "str | Path", schema: CsvSchema) -> Tuple[List[SiloDataset], LoadReport]:
    """Read one header-row CSV into silos keyed by ``schema.silo_column``.

    Rows with an empty, unparsable or non-finite field are dropped and
    counted per silo in the returned report.
    """
    path = Path(path)
    report = LoadReport()
    rows: Dict[str, List[Tuple[float, float, int, float, List[float]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in schema.columns() if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        for row in reader:
            silo = (row.get(schema.silo_column) or "").strip()
            key = silo or "<missing>"
            lat = _finite(row[schema.lat_column])
            lon = _finite(row[schema.lon_column])
            target = _finite(row[schema.target_column])
            year = _finite(row[schema.year_column])
            feats = [_finite(row[c]) for c in schema.feature_columns]
            ok = (
                silo
                and None not in (lat, lon, target, year)
                and all(f is not None for f in feats)
                and -90 <= lat <= 90
                and -180 <= lon <= 180
                and float(year).is_integer()
            )
            if not ok:
                report.dropped[key] = report.dropped.get(key, 0) + 1
                continue
            rows.setdefault(silo, []).append((lat, lon, int(year), target, feats))
            report.kept[silo] = report.kept.get(silo, 0) + 1
    if not rows:
        raise ValueError(f"{path}: no usable rows")
    silos = []
    for silo_id in sorted(rows):
        recs = rows[silo_id]
        loc = GeoPoint(float(np.mean([r[0] for r in recs])), float(np.mean([r[1] for r in recs])))
        silos.append(
            SiloDataset(
                silo_id,
                loc,
                np.array([r[4] for r in recs], dtype=np.float64).reshape(len(recs), len(schema.feature_columns)),
                np.array([r[3] for r in recs]),
                np.array([r[2] for r in recs]),
            )
        )
    log.info("csv load report", extra={"record": report.as_record()})
    return silos, report


def write_csv(silos: Sequence[SiloDataset], path: "str | Path", schema: Optional[CsvSchema] = None) -> Path:
    """Export silos in the ingestion schema (one row per record, full precision)."""
    if not silos:
        raise ValueError("nothing to write")
    schema = schema or default_schema(silos[0].feature_dim)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(schema.columns())
        for s in silos:
            for x, y, yr in s.records():
                w.writerow([s.silo_id, repr(s.location.lat), repr(s.location.lon), yr, repr(y), *map(repr, x.tolist())])
    return path


# -- splitting --------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """Year-forward split: test on ``test_year``, train/val on earlier years."""

    test_year: int
    val_fraction: float = 0.15

    def __post_init__(self) -> None:
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


def split(ds: SiloDataset, plan: SplitPlan, seed: int) -> Tuple[SiloDataset, SiloDataset, SiloDataset]:
    """Return ``(train, val, test)``.

    Records after the test year are excluded, so a model never sees the
    future.  The validation count is ``floor(val_fraction * n_earlier)``.
    """
    test_idx = np.flatnonzero(ds.years == plan.test_year)
    if test_idx.size == 0:
        raise ValueError(f"silo {ds.silo_id}: no records for test year {plan.test_year}")
    earlier = np.flatnonzero(ds.years < plan.test_year)
    if earlier.size == 0:
        raise ValueError(f"silo {ds.silo_id}: no records before test year {plan.test_year}")
    rng = keyed_rng(seed, "split", ds.silo_id, plan.test_year)
    earlier = earlier[rng.permutation(earlier.size)]
    n_val = int(math.floor(plan.val_fraction * earlier.size))
    return ds.subset(earlier[n_val:]), ds.subset(earlier[:n_val]), ds.subset(test_idx)


# -- featurization ----------------------------------------------------------


def default_bin_edges(low: float, high: float, bins: int = 32) -> np.ndarray:
    return np.linspace(low, high, bins + 1)


def featurize_histogram(raster: np.ndarray, bin_edges: np.ndarray) -> np.ndarray:
    """Per-band pixel histograms, normalized to frequencies, concatenated band-major.

    ``raster`` is ``[bands, pixels]``.  Pixels outside the edge range are
    counted in the first or last bin.
    """
    raster = np.atleast_2d(np.asarray(raster, dtype=np.float64))
    edges = np.asarray(bin_edges, dtype=np.float64)
    b = edges.size - 1
    if b < 2:
        raise ValueError("need at least 2 bins")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    if raster.shape[1] == 0:
        raise ValueError("raster has no pixels")
    idx = np.clip(np.searchsorted(edges, raster, side="right") - 1, 0, b - 1)
    out = np.empty((raster.shape[0], b))
    for band in range(raster.shape[0]):
        out[band] = np.bincount(idx[band], minlength=b) / raster.shape[1]
    return out.reshape(-1)


# -- normalization ----------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds: SiloDataset) -> SiloDataset:
        return ds.with_features((ds.features - self.mean) / self.std)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Normalization:
    mode: str
    per_silo: Dict[str, NormStats]
    warnings: List[str] = field(default_factory=list)

    def stats_for(self, silo_id: str) -> NormStats:
        if self.mode == "global":
            return next(iter(self.per_silo.values()))
        return self.per_silo[silo_id]

    def apply(self, ds: SiloDataset) -> SiloDataset:
        return self.stats_for(ds.silo_id).apply(ds)


def _moments(x: np.ndarray, label: str, warnings: List[str]) -> NormStats:
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    low = var < VAR_FLOOR
    if np.any(low):
        msg = f"{label}: zero-variance features {np.flatnonzero(low).tolist()} floored at {VAR_FLOOR}"
        warnings.append(msg)
        log.warning(msg)
    return NormStats(mean, np.sqrt(np.maximum(var, VAR_FLOOR)))


def normalize_features(silos: Sequence[SiloDataset], mode: str = "per_silo") -> Tuple[List[SiloDataset], Normalization]:
    """Z-score the given (training) splits.

    ``per_silo`` computes statistics inside each silo; ``global`` pools all
    silos.  The returned :class:`Normalization` applies the same transform
    to validation and test splits.
    """
    if not silos:
        raise ValueError("no silos to normalize")
    warnings: List[str] = []
    if mode == "per_silo":
        stats = {s.silo_id: _moments(s.features, s.silo_id, warnings) for s in silos}
    elif mode == "global":
        pooled = _moments(np.concatenate([s.features for s in silos]), "global", warnings)
        stats = {s.silo_id: pooled for s in silos}
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    norm = Normalization(mode, stats, warnings)
    return [norm.apply(s) for s in silos], norm
