"""Experiment runner: six training regimes over year-forward splits and seeds.

Every regime in a matrix shares the model architecture, the splits and the
feature normalization, so RMSE differences come from the training regime
alone.  Each (test year, seed) job derives its randomness from those two
numbers only, which makes the report independent of scheduling.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from silofed import data, ensemble, federation, nncore, privacy
from silofed._rng import keyed_rng
from silofed.data import Normalization, SiloDataset, SplitPlan
from silofed.ensemble import ModelBundle, RankWeighting
from silofed.federation import FedConfig, TrainConfig
from silofed.nncore import ModelSpec
from silofed.privacy import PrivacySpec

log = logging.getLogger(__name__)

REGIMES = (
    "traditional_pooled",
    "local_only",
    "model_sharing",
    "model_sharing_ldp",
    "federated",
    "federated_ldp",
)
LDP_REGIMES = ("model_sharing_ldp", "federated_ldp")

REPORT_COLUMNS = ["regime", "year", "seed", "silo", "rmse", "epsilon", "status", "error"]


def fmt(x: float) -> str:
    """Six significant digits, the precision of every number in written reports."""
    return f"{x:.6g}"


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by all regimes of one matrix.

    ``train`` drives the single-model regimes (pooled, local, model sharing);
    ``fed`` drives the federated ones.  Their ``seed`` fields are replaced by
    the per-job seed at run time.
    """

    model: ModelSpec
    train: TrainConfig = TrainConfig()
    fed: FedConfig = FedConfig()
    privacy: Optional[PrivacySpec] = None
    weighting: RankWeighting = RankWeighting()
    normalization: str = "global"
    val_fraction: float = 0.15

    def __post_init__(self) -> None:
        if self.normalization not in ("global", "per_silo"):
            raise ValueError(f"unknown normalization mode {self.normalization!r}")
        SplitPlan(0, self.val_fraction)

    def canonical(self) -> dict:
        d = dataclasses.asdict(self)
        # scheduling knobs do not change results
        d["fed"].pop("threads")
        d["fed"].pop("checkpoint_dir")
        d["train"].pop("seed")
        d["fed"].pop("seed")
        return d

    def hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RegimeSpec:
    regime: str
    config: ExperimentConfig

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.regime in LDP_REGIMES and self.config.privacy is None:
            raise ValueError(f"regime {self.regime} needs a privacy section")


@dataclass
class Cell:
    """One (regime, test year, seed) outcome."""

    regime: str
    year: int
    seed: int
    rmse: Dict[str, float] = field(default_factory=dict)
    epsilon: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None
    wall_clock: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def mean_rmse(self) -> float:
        return math.fsum(self.rmse.values()) / len(self.rmse) if self.rmse else math.nan


@dataclass
class ExperimentReport:
    config_hash: str
    regimes: List[str]
    years: List[int]
    seeds: List[int]
    cells: List[Cell]

    def cell(self, regime: str, year: int, seed: int) -> Cell:
        for c in self.cells:
            if (c.regime, c.year, c.seed) == (regime, year, seed):
                return c
        raise KeyError((regime, year, seed))

    def aggregate(self) -> Dict[Tuple[str, int], float]:
        """Mean over seeds of each (regime, year) cell's silo-averaged RMSE."""
        out = {}
        for r in self.regimes:
            for y in self.years:
                vals = [c.mean_rmse for c in self.cells if c.regime == r and c.year == y and c.ok]
                out[(r, y)] = math.fsum(vals) / len(vals) if vals else math.nan
        return out

    def regime_means(self) -> Dict[str, float]:
        """Mean per-silo RMSE over every successful cell of a regime."""
        out = {}
        for r in self.regimes:
            vals = [v for c in self.cells if c.regime == r and c.ok for v in c.rmse.values()]
            out[r] = math.fsum(vals) / len(vals) if vals else math.nan
        return out

    def failures(self) -> List[Cell]:
        return [c for c in self.cells if not c.ok]

    def write(self, out_dir: "str | Path") -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return {"report": self._write_csv(out_dir / "report.csv"), "summary": self._write_summary(out_dir / "summary.txt")}

    def _write_csv(self, path: Path) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for c in self.cells:
                if not c.ok:
                    w.writerow([c.regime, c.year, c.seed, "", "", "", "failed", c.error])
                    continue
                for sid in sorted(c.rmse):
                    eps = c.epsilon.get(sid)
                    w.writerow([c.regime, c.year, c.seed, sid, fmt(c.rmse[sid]), "" if eps is None else fmt(eps), "ok", ""])
        return path

    def _write_summary(self, path: Path) -> Path:
        lines = [
            f"config_hash: {self.config_hash}",
            f"seeds: {self.seeds}",
            f"test_years: {self.years}",
            f"cells: {len(self.cells)} ({len(self.failures())} failed)",
            "",
            "mean RMSE by regime:",
        ]
        width = max(len(r) for r in self.regimes)
        for r, v in self.regime_means().items():
            lines.append(f"  {r:<{width}}  {fmt(v)}")
        lines += ["", "mean RMSE by regime and test year (averaged over seeds):"]
        for (r, y), v in self.aggregate().items():
            lines.append(f"  {r:<{width}}  {y}  {fmt(v)}")
        eps_lines = []
        for r in self.regimes:
            eps = [e for c in self.cells if c.regime == r and c.ok for e in c.epsilon.values()]
            if eps:
                eps_lines.append(f"  {r:<{width}}  max epsilon {fmt(max(eps))}")
        if eps_lines:
            lines += ["", "privacy spent:"] + eps_lines
        if self.failures():
            lines += ["", "failures:"]
            lines += [f"  {c.regime} year={c.year} seed={c.seed}: {c.error}" for c in self.failures()]
        lines += ["", "wall-clock seconds by regime:"]
        for r in self.regimes:
            lines.append(f"  {r:<{width}}  {sum(c.wall_clock for c in self.cells if c.regime == r):.1f}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def read_report_csv(path: "str | Path") -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- one (test year, seed) job ---------------------------------------------


def job_seed(seed: int, year: int) -> int:
    """Training seed of one job; every regime of the job shares it."""
    return int(keyed_rng(seed, "job", year).integers(2**31 - 1))


@dataclass
class _Prepared:
    train: List[SiloDataset]
    val: List[SiloDataset]
    test: List[SiloDataset]
    norm: Normalization

    def normalized(self, part: str) -> List[SiloDataset]:
        return [self.norm.apply(s) for s in getattr(self, part)]


def _prepare(silos: Sequence[SiloDataset], plan: SplitPlan, seed: int, mode: str) -> _Prepared:
    parts = [data.split(s, plan, seed) for s in sorted(silos, key=lambda s: s.silo_id)]
    train = [p[0] for p in parts]
    for t in train:
        if len(t) < 2:
            raise ValueError(f"silo {t.silo_id}: training split too small ({len(t)} records)")
    _, norm = data.normalize_features(train, mode)
    return _Prepared(train, [p[1] for p in parts], [p[2] for p in parts], norm)


class _Job:
    """Runs regimes for one (test year, seed), sharing splits and local models."""

    def __init__(self, config: ExperimentConfig, silos: Sequence[SiloDataset], year: int, seed: int):
        self.config = config
        self.year = year
        self.seed = seed
        self.train_seed = job_seed(seed, year)
        self.prep = _prepare(silos, SplitPlan(year, config.val_fraction), seed, config.normalization)
        self._bundles: Dict[bool, List[ModelBundle]] = {}

    @property
    def train_cfg(self) -> TrainConfig:
        return replace(self.config.train, seed=self.train_seed)

    @property
    def fed_cfg(self) -> FedConfig:
        return replace(self.config.fed, seed=self.train_seed, threads=1, checkpoint_dir=None)

    def bundles(self, private: bool) -> List[ModelBundle]:
        if private not in self._bundles:
            dp = self.config.privacy if private else None
            p = self.prep
            self._bundles[private] = [
                ensemble.train_local(t, self.config.model, self.train_cfg, dp, v, p.norm.stats_for(t.silo_id))
                for t, v in zip(p.train, p.val)
            ]
        return self._bundles[private]

    def run(self, regime: str) -> Tuple[Dict[str, float], Dict[str, float]]:
        cfg, p = self.config, self.prep
        if regime == "traditional_pooled":
            pooled_val = [v for v in p.normalized("val") if len(v)]
            res = federation.train_centralized(
                data.concat_silos(p.normalized("train")),
                cfg.model,
                self.train_cfg,
                val=data.concat_silos(pooled_val) if pooled_val else None,
            )
            return {t.silo_id: federation.evaluate(res.params, None, t).rmse for t in p.normalized("test")}, {}
        if regime == "local_only":
            return {b.silo_id: _bundle_rmse(b, t) for b, t in zip(self.bundles(False), p.test)}, {}
        if regime in ("model_sharing", "model_sharing_ldp"):
            private = regime == "model_sharing_ldp"
            bundles = self.bundles(private)
            rmse = ensemble.evaluate_ensemble(bundles, p.test, cfg.weighting)
            return rmse, ({b.silo_id: b.epsilon for b in bundles} if private else {})
        if regime in ("federated", "federated_ldp"):
            dp = cfg.privacy if regime == "federated_ldp" else None
            val = p.normalized("val")
            res = federation.run_federation(
                p.normalized("train"), cfg.model, self.fed_cfg, dp, val if all(len(v) for v in val) else None
            )
            agg = cfg.fed.aggregation
            rmse = {t.silo_id: federation.evaluate(res.params, res.bn_store, t, agg).rmse for t in p.normalized("test")}
            eps = {}
            if dp is not None:
                eps = {sid: privacy.epsilon(acc, dp.delta) for sid, acc in res.accountants.items()}
            return rmse, eps
        raise ValueError(f"unknown regime {regime!r}")


def _bundle_rmse(bundle: ModelBundle, test: SiloDataset) -> float:
    return nncore.rmse(bundle.predict(test.features), test.targets)


def _run_job(config: ExperimentConfig, regimes: Sequence[str], silos, year: int, seed: int) -> List[Cell]:
    try:
        job = _Job(config, silos, year, seed)
    except Exception as exc:  # noqa: BLE001 - isolate the job
        log.warning("job year=%s seed=%s failed during setup: %s", year, seed, exc)
        return [Cell(r, year, seed, error=f"{type(exc).__name__}: {exc}") for r in regimes]
    cells = []
    for r in regimes:
        start = time.perf_counter()
        try:
            rmse, eps = job.run(r)
            bad = [k for k, v in rmse.items() if not math.isfinite(v)]
            if bad:
                raise FloatingPointError(f"non-finite RMSE for {bad}")
            cells.append(Cell(r, year, seed, rmse, eps, wall_clock=time.perf_counter() - start))
        except Exception as exc:  # noqa: BLE001
            log.warning("cell %s year=%s seed=%s failed: %s", r, year, seed, exc)
            cells.append(Cell(r, year, seed, error=f"{type(exc).__name__}: {exc}", wall_clock=time.perf_counter() - start))
    return cells


def run_regime(spec: RegimeSpec, silos: Sequence[SiloDataset], plan: SplitPlan, seed: int) -> Dict[str, float]:
    """Per-silo test RMSE of one regime for one split and seed."""
    config = replace(spec.config, val_fraction=plan.val_fraction)
    job = _Job(config, silos, plan.test_year, seed)
    return job.run(spec.regime)[0]


def _check_matrix(config: ExperimentConfig, regimes: Sequence[str], years: Sequence[int], seeds: Sequence[int]) -> None:
    if not regimes or not years or not seeds:
        raise ValueError("regimes, years and seeds must be nonempty")
    for r in regimes:
        RegimeSpec(r, config)
    for name, xs in (("regimes", regimes), ("years", years), ("seeds", seeds)):
        if len(set(xs)) != len(xs):
            raise ValueError(f"duplicate entries in {name}: {list(xs)}")


def run_matrix(
    config: ExperimentConfig,
    regimes: Sequence[str],
    years: Sequence[int],
    seeds: Sequence[int],
    silos: Sequence[SiloDataset],
    threads: int = 1,
) -> ExperimentReport:
    """Full cross product of regimes, test years and seeds.

    A failing cell is recorded and the matrix carries on.  Cells are listed
    in (regime, year, seed) order whatever the thread count.
    """
    _check_matrix(config, regimes, years, seeds)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    jobs = [(y, s) for y in years for s in seeds]
    if threads == 1:
        results = [_run_job(config, regimes, silos, y, s) for y, s in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda js: _run_job(config, regimes, silos, *js), jobs))
    by_key = {(c.regime, c.year, c.seed): c for cells in results for c in cells}
    ordered = [by_key[(r, y, s)] for r in regimes for y in years for s in seeds]
    return ExperimentReport(config.hash(), list(regimes), list(years), list(seeds), ordered)


# -- privacy sweep -----------------------------------------------------------


@dataclass(frozen=True)
class SweepPoint:
    epsilon: float
    median_rmse: float
    mean_rmse: float
    values: Tuple[float, ...]


def sweep_epsilon(
    config: ExperimentConfig,
    budgets: Sequence[float],
    seeds: Sequence[int],
    silos: Sequence[SiloDataset],
    year: int,
    threads: int = 1,
) -> List[SweepPoint]:
    """Federated LDP runs per (budget, seed); one point per budget.

    Each value is a seed's silo-averaged test RMSE; the curve reports the
    median over seeds (the mean is kept alongside).  ``inf`` is a valid budget.
    """
    if config.privacy is None:
        raise ValueError("epsilon sweep needs a privacy section")
    if not budgets:
        raise ValueError("no budgets")
    if any(not b > 0 for b in budgets) or list(budgets) != sorted(budgets):
        raise ValueError(f"budgets must be positive and sorted, got {list(budgets)}")
    points = []
    for b in budgets:
        cfg = replace(config, privacy=replace(config.privacy, epsilon_budget=float(b)))
        report = run_matrix(cfg, ["federated_ldp"], [year], seeds, silos, threads)
        failed = report.failures()
        if failed:
            raise RuntimeError(f"sweep at epsilon={b} failed: {failed[0].error}")
        vals = tuple(c.mean_rmse for c in report.cells)
        points.append(SweepPoint(float(b), statistics.median(vals), math.fsum(vals) / len(vals), vals))
    return points


def write_curve(points: Sequence[SweepPoint], path: "str | Path") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "median_rmse", "mean_rmse", "n_seeds"])
        for p in points:
            w.writerow([fmt(p.epsilon), fmt(p.median_rmse), fmt(p.mean_rmse), len(p.values)])
    return path


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties."""
    return float(spearmanr(x, y).statistic)


# -- artifacts ---------------------------------------------------------------


def save_models(
    config: ExperimentConfig, silos: Sequence[SiloDataset], year: int, seed: int, out_dir: "str | Path"
) -> Dict[str, Path]:
    """Train and store the model-sharing ensemble and the federated model of one job."""
    out_dir = Path(out_dir)
    job = _Job(config, silos, year, seed)
    paths = {"manifest": ensemble.write_manifest(job.bundles(False), out_dir / f"ensemble_{year}_s{seed}", config.hash())}
    p = job.prep
    res = federation.run_federation(p.normalized("train"), config.model, job.fed_cfg, None, p.normalized("val"))
    ckpt = out_dir / "checkpoints" / f"federated_{year}_s{seed}.ckpt"
    paths["checkpoint"] = nncore.save_params(res.params, ckpt)
    paths["history"] = federation.write_history_csv(res.history, out_dir / "curves" / f"federated_{year}_s{seed}.csv")
    return paths
