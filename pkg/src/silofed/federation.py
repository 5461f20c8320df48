"""Federated averaging across silos with optional local differential privacy.

A round selects ``max(ceil(C*K), 1)`` silos, runs ``E`` local epochs of
minibatch SGD on each (through the privacy mechanism when one is given),
then averages the returned parameters weighted by silo size.  In ``fedbn``
mode each silo also keeps its own batch-norm tensors between rounds.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from silofed import nncore, privacy
from silofed._rng import keyed_rng
from silofed.data import SiloDataset
from silofed.nncore import Batch, ModelSpec, ParameterSet
from silofed.privacy import AccountantState, PrivacySpec

log = logging.getLogger(__name__)

AGGREGATIONS = ("fedavg", "fedbn")


@dataclass(frozen=True)
class LRSchedule:
    """Step decay: ``base * factor ** (number of decay points <= epoch)``."""

    base: float = 0.01
    decay_points: Tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "decay_points", tuple(int(p) for p in self.decay_points))
        if not self.base > 0:
            raise ValueError(f"learning rate must be > 0, got {self.base}")
        if not (0.0 < self.decay_factor < 1.0):
            raise ValueError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if any(b <= a for a, b in zip(self.decay_points, self.decay_points[1:])):
            raise ValueError("decay_points must be strictly increasing")

    def at(self, epoch: int) -> float:
        return self.base * self.decay_factor ** sum(1 for p in self.decay_points if epoch >= p)


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 40
    fraction: float = 1.0
    local_epochs: int = 4
    batch_size: int = 32
    lr: LRSchedule = LRSchedule()
    aggregation: str = "fedbn"
    early_stopping: bool = True
    patience: int = 10
    seed: int = 0
    threads: int = 1
    checkpoint_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class RoundRecord:
    round: int
    selected: List[str]
    train_loss: Dict[str, float]
    val_loss: float
    epsilon: Dict[str, float]


def sample_size(n_silos: int, fraction: float) -> int:
    # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
    return max(math.ceil(fraction * n_silos - 1e-9), 1)


def select_silos(silo_ids: Sequence[str], fraction: float, round_index: int, seed: int) -> List[str]:
    """Uniform sample without replacement, returned in the given (canonical) order."""
    if not silo_ids:
        raise ValueError("no silos to select from")
    m = sample_size(len(silo_ids), fraction)
    if m >= len(silo_ids):
        return list(silo_ids)
    rng = keyed_rng(seed, "select", round_index)
    chosen = np.sort(rng.choice(len(silo_ids), size=m, replace=False))
    return [silo_ids[i] for i in chosen]


def epoch_batches(n: int, batch_size: int, seed: int, silo_id: str, epoch: int, has_bn: bool) -> List[np.ndarray]:
    """Shuffled minibatch indices for one local epoch.

    The final partial batch is kept.  With batch norm a trailing batch of
    fewer than ``batch_size / 2`` rows is merged into the previous one: batch
    statistics of two or three rows make the normalization nearly singular
    and the gradients explode.
    """
    perm = keyed_rng(seed, "shuffle", silo_id, epoch).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if has_bn and len(batches) > 1 and 2 * len(batches[-1]) < batch_size:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _has_bn(params: ParameterSet) -> bool:
    return bool(params.bn_names)


class LocalUpdate(NamedTuple):
    params: ParameterSet
    train_loss: float
    dp_steps: int


def silo_update(
    global_params: ParameterSet,
    silo: SiloDataset,
    cfg: FedConfig,
    dp: Optional[PrivacySpec] = None,
    round_index: int = 0,
    max_dp_steps: Optional[int] = None,
) -> LocalUpdate:
    """Run ``cfg.local_epochs`` epochs of local SGD starting from ``global_params``.

    Epochs are numbered cumulatively (``round_index * E + e``); that index
    keys the shuffle and noise streams and picks the learning rate.  With
    ``dp`` every step uses clipped, noised per-example gradients (batch norm
    at its running statistics, which are then left untouched) and at most
    ``max_dp_steps`` steps are taken.
    """
    if silo.feature_dim != nncore.input_dim(global_params) and len(silo):
        raise ValueError(f"silo {silo.silo_id}: feature dim {silo.feature_dim} does not match the model")
    has_bn = _has_bn(global_params)
    n = len(silo)
    if has_bn and n < 2:
        raise ValueError(f"silo {silo.silo_id}: batch norm needs at least 2 training records, got {n}")
    params = global_params
    loss = math.nan
    steps = 0
    budget = math.inf if max_dp_steps is None else max_dp_steps
    # divergence surfaces as a non-finite epoch loss below
    with np.errstate(over="ignore", invalid="ignore"):
        for e in range(cfg.local_epochs):
            if dp is not None and steps >= budget:
                break
            epoch = round_index * cfg.local_epochs + e
            lr = cfg.lr.at(epoch)
            noise_rng = keyed_rng(cfg.seed, "noise", silo.silo_id, epoch) if dp is not None else None
            sse = 0.0
            seen = 0
            for idx in epoch_batches(n, cfg.batch_size, cfg.seed, silo.silo_id, epoch, has_bn and dp is None):
                if dp is not None and steps >= budget:
                    break
                batch = Batch.trusted(silo.features[idx], silo.targets[idx])
                if dp is None:
                    preds, cache = nncore.forward(params, batch, "train")
                    grads = nncore.backward(params, cache, batch.targets)
                    params = nncore.sgd_step(cache.params, grads, lr)
                else:
                    per_example, preds = nncore.per_example_gradients_stacked(params, batch, return_predictions=True)
                    grads = privacy.privatize_stacked(per_example, dp, noise_rng)
                    params = nncore.sgd_step(params, grads, lr)
                    steps += 1
                r = preds - batch.targets
                sse += float(r @ r)
                seen += len(idx)
            if seen:
                loss = sse / seen
                if not math.isfinite(loss):
                    raise FloatingPointError(
                        f"silo {silo.silo_id}: non-finite training loss at epoch {epoch} (lr={lr:g})"
                    )
    return LocalUpdate(params, loss, steps)


def aggregate(
    locals_: Sequence[Tuple[ParameterSet, int]],
    mode: str = "fedavg",
    previous_global: Optional[ParameterSet] = None,
) -> ParameterSet:
    """Size-weighted parameter average ``sum_k (n_k / n) w_k``.

    Batch-norm entries are averaged too in both modes; under ``fedbn`` that
    average only serves as the fallback for silos without local batch-norm
    state (see :func:`split_bn`).  Summation follows the input order.
    """
    if mode not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if not locals_:
        if previous_global is None:
            raise ValueError("nothing to aggregate")
        return previous_global
    sets = [p for p, _ in locals_]
    nncore.stack_structure_check(sets)
    if previous_global is not None and previous_global.structure() != sets[0].structure():
        raise ValueError("local parameters differ structurally from the previous global model")
    sizes = [int(n) for _, n in locals_]
    if min(sizes) < 1:
        raise ValueError("silo sizes must be >= 1")
    total = float(sum(sizes))
    weights = [n / total for n in sizes]
    out = {}
    for name in sets[0].names:
        acc = weights[0] * sets[0][name]
        for w, p in zip(weights[1:], sets[1:]):
            acc = acc + w * p[name]
        out[name] = acc
    return sets[0].replace(out)


def split_bn(params: ParameterSet) -> Dict[str, np.ndarray]:
    return {name: params[name] for name in params.bn_names}


def with_local_bn(global_params: ParameterSet, bn_store: Dict[str, Dict[str, np.ndarray]], silo_id: str) -> Tuple[ParameterSet, bool]:
    """Splice a silo's own batch-norm tensors into the global model.

    Returns the parameters and whether the global fallback had to be used.
    """
    local = bn_store.get(silo_id)
    if local is None:
        return global_params, _has_bn(global_params)
    return global_params.replace(local), False


@dataclass
class FederationResult:
    params: ParameterSet
    bn_store: Dict[str, Dict[str, np.ndarray]]
    history: List[RoundRecord]
    accountants: Dict[str, AccountantState] = field(default_factory=dict)
    best_round: Optional[int] = None
    aggregation: str = "fedavg"

    def params_for(self, silo_id: str) -> ParameterSet:
        if self.aggregation == "fedbn":
            return with_local_bn(self.params, self.bn_store, silo_id)[0]
        return self.params


def pooled_loss(result_params, bn_store, aggregation: str, silos: Sequence[SiloDataset]) -> float:
    sse = 0.0
    count = 0
    for s in silos:
        if not len(s):
            continue
        params = with_local_bn(result_params, bn_store, s.silo_id)[0] if aggregation == "fedbn" else result_params
        r = nncore.predict(params, s.features) - s.targets
        sse += float(r @ r)
        count += len(s)
    return sse / count if count else math.nan


def run_federation(
    train: Sequence[SiloDataset],
    spec: ModelSpec,
    cfg: FedConfig,
    dp: Optional[PrivacySpec] = None,
    val: Optional[Sequence[SiloDataset]] = None,
    dp_overrides: Optional[Dict[str, PrivacySpec]] = None,
) -> FederationResult:
    """Server loop: select, update locally, aggregate, validate.

    ``val`` silos (matched to ``train`` by id) drive early stopping; the
    best-validation state is returned when early stopping is enabled.  With
    ``dp`` a silo stops participating once its next step would exceed its
    epsilon budget, and the run ends when no silo can continue.
    ``dp_overrides`` gives individual silos their own privacy settings.
    """
    if not train:
        raise ValueError("no silos")
    ids = [s.silo_id for s in train]
    if len(set(ids)) != len(ids):
        raise ValueError("silo ids must be unique")
    dims = {s.feature_dim for s in train if len(s)}
    if len(dims) > 1 or (dims and dims != {spec.input_dim}):
        raise ValueError(f"inconsistent feature dims {sorted(dims)} for model input {spec.input_dim}")
    by_id = {s.silo_id: s for s in train}
    specs: Dict[str, PrivacySpec] = {}
    accountants: Dict[str, AccountantState] = {}
    if dp is not None:
        for s in train:
            specs[s.silo_id] = (dp_overrides or {}).get(s.silo_id, dp)
            q = min(1.0, cfg.batch_size / max(len(s), 1))
            if math.isfinite(specs[s.silo_id].epsilon_budget):
                privacy.check_regime(specs[s.silo_id], q)
            accountants[s.silo_id] = AccountantState(q, specs[s.silo_id].noise_multiplier)

    global_params = nncore.init_model(spec, cfg.seed)
    bn_store: Dict[str, Dict[str, np.ndarray]] = {}
    history: List[RoundRecord] = []
    best = (math.inf, global_params, {}, None)
    bad_rounds = 0
    exhausted: set = set()
    use_val = bool(val) and any(len(v) for v in val)
    if cfg.checkpoint_dir is not None:
        Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)

    def remaining(silo_id: str) -> Optional[int]:
        if dp is None:
            return None
        a = accountants[silo_id]
        return privacy.steps_until_exhausted(specs[silo_id], a.sampling_rate, already=a.steps)

    def local_job(silo_id: str, t: int, budget: Optional[int]) -> LocalUpdate:
        start = global_params
        if cfg.aggregation == "fedbn":
            start = with_local_bn(global_params, bn_store, silo_id)[0]
        return silo_update(start, by_id[silo_id], cfg, specs.get(silo_id), t, budget)

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(cfg.rounds):
            budgets = {sid: remaining(sid) for sid in ids if sid not in exhausted}
            active = [sid for sid in ids if sid not in exhausted and budgets[sid] != 0]
            exhausted.update(sid for sid in ids if sid not in active)
            if not active:
                log.info("all silos exhausted their privacy budget after %d rounds", t)
                break
            selected = select_silos(active, cfg.fraction, t, cfg.seed)
            if pool is None:
                updates = [local_job(sid, t, budgets[sid]) for sid in selected]
            else:
                updates = list(pool.map(lambda sid: local_job(sid, t, budgets[sid]), selected))
            global_params = aggregate(
                [(u.params, len(by_id[sid])) for sid, u in zip(selected, updates)], cfg.aggregation, global_params
            )
            if cfg.aggregation == "fedbn":
                for sid, u in zip(selected, updates):
                    bn_store[sid] = split_bn(u.params)
            eps = {}
            for sid, u in zip(selected, updates):
                if dp is not None:
                    accountants[sid] = replace(accountants[sid], steps=accountants[sid].steps + u.dp_steps)
                    eps[sid] = privacy.epsilon(accountants[sid], specs[sid].delta)
                else:
                    eps[sid] = 0.0
            val_loss = pooled_loss(global_params, bn_store, cfg.aggregation, val) if use_val else math.nan
            history.append(
                RoundRecord(t, list(selected), {sid: u.train_loss for sid, u in zip(selected, updates)}, val_loss, eps)
            )
            if cfg.checkpoint_dir is not None:
                nncore.save_params(global_params, Path(cfg.checkpoint_dir) / f"round_{t:04d}.ckpt")
            if use_val:
                if val_loss < best[0]:
                    best = (val_loss, global_params, dict(bn_store), t)
                    bad_rounds = 0
                else:
                    bad_rounds += 1
                    if cfg.early_stopping and bad_rounds >= cfg.patience:
                        log.info("early stopping after round %d (best round %s)", t, best[3])
                        break
    finally:
        if pool is not None:
            pool.shutdown()

    result = FederationResult(global_params, bn_store, history, accountants, None, cfg.aggregation)
    if cfg.early_stopping and use_val and best[3] is not None:
        result.params, result.bn_store, result.best_round = best[1], best[2], best[3]
    return result


class EvalResult(NamedTuple):
    rmse: float
    used_fallback_bn: bool


def evaluate(
    global_params: ParameterSet,
    bn_store: Optional[Dict[str, Dict[str, np.ndarray]]],
    test: SiloDataset,
    mode: str = "fedavg",
) -> EvalResult:
    """County-level RMSE of the (silo-specific, under fedbn) model on ``test``."""
    if not len(test):
        raise ValueError(f"silo {test.silo_id}: empty test set")
    params, fallback = global_params, False
    if mode == "fedbn":
        params, fallback = with_local_bn(global_params, bn_store or {}, test.silo_id)
        if fallback:
            log.warning("silo %s has no local batch-norm state; using the averaged fallback", test.silo_id)
    return EvalResult(nncore.rmse(nncore.predict(params, test.features), test.targets), fallback)


@dataclass(frozen=True)
class TrainConfig:
    """Centralized (single-dataset) training: one epoch per validation check."""

    epochs: int = 160
    batch_size: int = 32
    lr: LRSchedule = LRSchedule()
    early_stopping: bool = True
    patience: int = 10
    seed: int = 0

    def as_fed_config(self, threads: int = 1) -> FedConfig:
        return FedConfig(
            rounds=self.epochs,
            fraction=1.0,
            local_epochs=1,
            batch_size=self.batch_size,
            lr=self.lr,
            aggregation="fedavg",
            early_stopping=self.early_stopping,
            patience=self.patience,
            seed=self.seed,
            threads=threads,
        )


def train_centralized(
    train: SiloDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    dp: Optional[PrivacySpec] = None,
    val: Optional[SiloDataset] = None,
) -> FederationResult:
    """Plain SGD on one dataset, run as a single-silo, one-epoch-per-round federation."""
    return run_federation([train], spec, cfg.as_fed_config(), dp, [val] if val is not None else None)


def write_history_csv(history: Sequence[RoundRecord], path: "str | Path") -> Path:
    """One row per (round, participating silo)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "silo", "train_loss", "epsilon", "val_loss"])
        for rec in history:
            for sid in rec.selected:
                w.writerow([rec.round, sid, f"{rec.train_loss[sid]:.6g}", f"{rec.epsilon[sid]:.6g}", f"{rec.val_loss:.6g}"])
    return path
