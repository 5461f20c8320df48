"""Feed-forward regression network with batch normalization and manual backprop.

The network is a stack of ``dense -> [batch norm] -> relu`` blocks followed by
a linear scalar head.  Parameters live in an immutable :class:`ParameterSet`;
every operation returns new values.

Tensor naming::

    hidden{i}.weight   (fan_in, width)
    hidden{i}.bias     (width,)
    bn{i}.gamma        (width,)       batch-norm, trainable
    bn{i}.beta         (width,)       batch-norm, trainable
    bn{i}.running_mean (width,)       batch-norm, statistics only
    bn{i}.running_var  (width,)       batch-norm, statistics only
    head.weight        (width, 1)
    head.bias          (1,)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from silofed._rng import keyed_rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

GradientSet = Dict[str, np.ndarray]

_RUNNING_SUFFIXES = (".running_mean", ".running_var")


def is_running_stat(name: str) -> bool:
    return name.endswith(_RUNNING_SUFFIXES)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the regression MLP.

    ``hidden_layers`` is a sequence of ``(width, use_bn)`` pairs.
    """

    input_dim: int
    hidden_layers: Tuple[Tuple[int, bool], ...] = ((64, True), (32, True))
    activation: str = "relu"
    output_dim: int = 1

    def __post_init__(self) -> None:
        layers = tuple((int(w), bool(bn)) for w, bn in self.hidden_layers)
        object.__setattr__(self, "hidden_layers", layers)
        if int(self.input_dim) < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        for width, _ in layers:
            if width < 1:
                raise ValueError(f"hidden widths must be positive, got {width}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output_dim != 1:
            raise ValueError("output_dim is fixed to 1 (scalar regression)")

    @property
    def has_bn(self) -> bool:
        return any(bn for _, bn in self.hidden_layers)


class ParameterSet:
    """Ordered, immutable collection of named float64 tensors.

    Each entry carries an ``is_bn`` flag marking the four batch-norm roles
    (gain, bias, running mean, running variance).
    """

    __slots__ = ("_names", "_tensors", "_bn", "_derived")

    def __init__(self, entries: Iterable[Tuple[str, np.ndarray, bool]]):
        names: List[str] = []
        tensors: Dict[str, np.ndarray] = {}
        bn: Dict[str, bool] = {}
        for name, tensor, is_bn in entries:
            if name in tensors:
                raise ValueError(f"duplicate parameter name {name!r}")
            arr = np.array(tensor, dtype=np.float64)
            arr.setflags(write=False)
            names.append(name)
            tensors[name] = arr
            bn[name] = bool(is_bn)
        self._names = tuple(names)
        self._tensors = tensors
        self._bn = bn
        self._derived: Dict[str, object] = {}

    def _evolve(self, updates: Mapping[str, np.ndarray], owned: bool) -> "ParameterSet":
        new = object.__new__(ParameterSet)
        new._names = self._names
        new._bn = self._bn
        new._derived = self._derived  # structure is unchanged
        tensors = dict(self._tensors)
        for name, value in updates.items():
            arr = value if owned else np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            tensors[name] = arr
        new._tensors = tensors
        return new

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray, bool]]:
        for name in self._names:
            yield name, self._tensors[name], self._bn[name]

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} entries, {self.num_values()} values)"

    @property
    def names(self) -> Tuple[str, ...]:
        return self._names

    def is_bn(self, name: str) -> bool:
        return self._bn[name]

    @property
    def bn_names(self) -> Tuple[str, ...]:
        if "bn" not in self._derived:
            self._derived["bn"] = tuple(n for n in self._names if self._bn[n])
        return self._derived["bn"]  # type: ignore[return-value]

    @property
    def trainable_names(self) -> Tuple[str, ...]:
        if "trainable" not in self._derived:
            self._derived["trainable"] = tuple(n for n in self._names if not is_running_stat(n))
        return self._derived["trainable"]  # type: ignore[return-value]

    @property
    def layers(self) -> Tuple[Tuple[int, bool], ...]:
        """``(index, has_bn)`` for each hidden block."""
        if "layers" not in self._derived:
            out = []
            i = 0
            while f"hidden{i}.weight" in self._tensors:
                out.append((i, f"bn{i}.gamma" in self._tensors))
                i += 1
            self._derived["layers"] = tuple(out)
        return self._derived["layers"]  # type: ignore[return-value]

    def num_values(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def structure(self) -> Tuple[Tuple[str, Tuple[int, ...], bool], ...]:
        return tuple((n, self._tensors[n].shape, self._bn[n]) for n in self._names)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParameterSet":
        """Return a copy with the named tensors swapped out (shapes must match)."""
        for name, value in updates.items():
            if name not in self._tensors:
                raise KeyError(f"unknown parameter {name!r}")
            if np.shape(value) != self._tensors[name].shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {np.shape(value)} vs {self._tensors[name].shape}"
                )
        return self._evolve(updates, owned=False)

    def bitwise_equal(self, other: "ParameterSet") -> bool:
        if self.structure() != other.structure():
            return False
        return all(
            self._tensors[n].tobytes() == other._tensors[n].tobytes() for n in self._names
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([self._tensors[n].ravel() for n in self._names])


@dataclass
class Batch:
    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.features.shape[0] < 1:
            raise ValueError("batch must contain at least one example")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"features have {self.features.shape[0]} rows but targets have {self.targets.shape[0]}"
            )
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise ValueError("batch contains non-finite values")

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def trusted(cls, features: np.ndarray, targets: np.ndarray) -> "Batch":
        """Build without validation, for rows taken from an already checked dataset."""
        b = object.__new__(cls)
        b.features = features
        b.targets = targets
        return b


def init_model(spec: ModelSpec, seed: int) -> ParameterSet:
    """Glorot-uniform dense weights, zero biases, identity batch-norm."""
    rng = keyed_rng(seed, "init")
    entries: List[Tuple[str, np.ndarray, bool]] = []
    fan_in = spec.input_dim
    for i, (width, use_bn) in enumerate(spec.hidden_layers):
        limit = np.sqrt(6.0 / (fan_in + width))
        entries.append((f"hidden{i}.weight", rng.uniform(-limit, limit, (fan_in, width)), False))
        entries.append((f"hidden{i}.bias", np.zeros(width), False))
        if use_bn:
            entries.append((f"bn{i}.gamma", np.ones(width), True))
            entries.append((f"bn{i}.beta", np.zeros(width), True))
            entries.append((f"bn{i}.running_mean", np.zeros(width), True))
            entries.append((f"bn{i}.running_var", np.ones(width), True))
        fan_in = width
    limit = np.sqrt(6.0 / (fan_in + 1))
    entries.append(("head.weight", rng.uniform(-limit, limit, (fan_in, 1)), False))
    entries.append(("head.bias", np.zeros(1), False))
    return ParameterSet(entries)


def _layers(params: ParameterSet) -> Tuple[Tuple[int, bool], ...]:
    return params.layers


def input_dim(params: ParameterSet) -> int:
    if "hidden0.weight" in params:
        return params["hidden0.weight"].shape[0]
    return params["head.weight"].shape[0]


@dataclass
class _LayerCache:
    a_in: np.ndarray
    pre_act: np.ndarray
    xhat: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None


@dataclass
class ForwardCache:
    """Activations from :func:`forward`.

    ``params`` holds the input parameters with running statistics advanced
    (train mode) or unchanged (eval mode).
    """

    mode: str
    layers: List[_LayerCache]
    last_hidden: np.ndarray
    predictions: np.ndarray
    params: ParameterSet
    source: ParameterSet = field(repr=False)


def forward(
    params: ParameterSet, batch: Batch, mode: str = "train"
) -> Tuple[np.ndarray, ForwardCache]:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch.features
    if x.shape[1] != input_dim(params):
        raise ValueError(f"feature dim {x.shape[1]} does not match model input {input_dim(params)}")
    n = x.shape[0]
    train = mode == "train"
    running: Dict[str, np.ndarray] = {}
    caches: List[_LayerCache] = []
    a = x
    for i, has_bn in _layers(params):
        z = a @ params[f"hidden{i}.weight"] + params[f"hidden{i}.bias"]
        cache = _LayerCache(a_in=a, pre_act=z)
        if has_bn:
            if train:
                if n < 2:
                    raise ValueError("train-mode batch norm needs at least 2 examples")
                mu = z.mean(axis=0)
                dev = z - mu
                var = (dev * dev).mean(axis=0)
                running[f"bn{i}.running_mean"] = (
                    (1 - BN_MOMENTUM) * params[f"bn{i}.running_mean"] + BN_MOMENTUM * mu
                )
                running[f"bn{i}.running_var"] = (
                    (1 - BN_MOMENTUM) * params[f"bn{i}.running_var"]
                    + BN_MOMENTUM * var * (n / (n - 1))
                )
            else:
                mu = params[f"bn{i}.running_mean"]
                var = params[f"bn{i}.running_var"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            cache.xhat, cache.inv_std = xhat, inv_std
            cache.pre_act = params[f"bn{i}.gamma"] * xhat + params[f"bn{i}.beta"]
        a = np.maximum(cache.pre_act, 0.0)
        caches.append(cache)
    preds = (a @ params["head.weight"] + params["head.bias"])[:, 0]
    new_params = params._evolve(running, owned=True) if running else params
    return preds, ForwardCache(mode, caches, a, preds, new_params, params)


def predict(params: ParameterSet, features: np.ndarray) -> np.ndarray:
    """Eval-mode predictions for a feature matrix."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return forward(params, Batch(feats, np.zeros(feats.shape[0])), "eval")[0]


def loss_mse(predictions: np.ndarray, targets: np.ndarray) -> float:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs {t.shape[0]} targets")
    if p.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    r = p - t
    return float(np.mean(r * r))


def rmse(predictions: np.ndarray, targets: np.ndarray) -> float:
    return float(np.sqrt(loss_mse(predictions, targets)))


def _backprop(params: ParameterSet, cache: ForwardCache, dpred: np.ndarray, per_example: bool):
    """Propagate d(loss)/d(prediction) back through the network.

    With ``per_example`` every gradient keeps a leading batch axis; this is
    only meaningful when rows are independent (eval-mode batch norm).
    """
    grads: Dict[str, np.ndarray] = {}
    col = dpred[:, None]
    if per_example:
        grads["head.weight"] = cache.last_hidden[:, :, None] * col[:, None, :]
        grads["head.bias"] = col.copy()
    else:
        grads["head.weight"] = cache.last_hidden.T @ col
        grads["head.bias"] = np.array([dpred.sum()])
    da = col @ params["head.weight"].T
    train = cache.mode == "train"
    n = dpred.shape[0]
    for (i, has_bn), lc in reversed(list(zip(_layers(params), cache.layers))):
        dy = da * (lc.pre_act > 0)
        if has_bn:
            if per_example:
                grads[f"bn{i}.gamma"] = dy * lc.xhat
                grads[f"bn{i}.beta"] = dy
            else:
                grads[f"bn{i}.gamma"] = (dy * lc.xhat).sum(axis=0)
                grads[f"bn{i}.beta"] = dy.sum(axis=0)
            dxhat = dy * params[f"bn{i}.gamma"]
            if train:
                dz = (lc.inv_std / n) * (
                    n * dxhat - dxhat.sum(axis=0) - lc.xhat * (dxhat * lc.xhat).sum(axis=0)
                )
            else:
                dz = dxhat * lc.inv_std
        else:
            dz = dy
        if per_example:
            grads[f"hidden{i}.weight"] = lc.a_in[:, :, None] * dz[:, None, :]
            grads[f"hidden{i}.bias"] = dz
        else:
            grads[f"hidden{i}.weight"] = lc.a_in.T @ dz
            grads[f"hidden{i}.bias"] = dz.sum(axis=0)
        da = dz @ params[f"hidden{i}.weight"].T
    return {name: grads[name] for name in params.trainable_names}


def backward(params: ParameterSet, cache: ForwardCache, targets: np.ndarray) -> GradientSet:
    """Gradient of the mean-squared-error loss w.r.t. every trainable tensor.

    A train-mode cache differentiates through the batch statistics; an
    eval-mode cache gives the running-statistics convention used for
    per-example gradients.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape != cache.predictions.shape:
        raise ValueError("targets do not match the cached batch")
    dpred = 2.0 * (cache.predictions - t) / t.shape[0]
    return _backprop(params, cache, dpred, per_example=False)


def per_example_gradients_stacked(
    params: ParameterSet, batch: Batch, return_predictions: bool = False
):
    """Per-example gradients with a leading batch axis on every tensor.

    With ``return_predictions`` also returns the eval-mode predictions the
    gradients were taken at.
    """
    preds, cache = forward(params, batch, "eval")
    dpred = 2.0 * (preds - batch.targets)
    grads = _backprop(params, cache, dpred, per_example=True)
    return (grads, preds) if return_predictions else grads


def per_example_gradients(params: ParameterSet, batch: Batch) -> List[GradientSet]:
    """One gradient per example; batch norm uses running statistics."""
    stacked = per_example_gradients_stacked(params, batch)
    return [{name: g[j] for name, g in stacked.items()} for j in range(len(batch))]


def sgd_step(params: ParameterSet, grads: Mapping[str, np.ndarray], lr: float) -> ParameterSet:
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    trainable = params.trainable_names
    if set(grads) != set(trainable):
        missing = sorted(set(trainable) - set(grads))
        extra = sorted(set(grads) - set(trainable))
        raise ValueError(f"gradient names do not match (missing={missing}, unexpected={extra})")
    updates = {}
    for name in trainable:
        g = np.asarray(grads[name])
        if g.shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: {g.shape} vs {params[name].shape}")
        updates[name] = params[name] - lr * g
    return params._evolve(updates, owned=True)


def gradient_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


# -- checkpoint format ------------------------------------------------------

CHECKPOINT_MAGIC = b"SILOFED\x00"
CHECKPOINT_VERSION = 1


def save_params(params: ParameterSet, path: "str | Path") -> Path:
    """Write a versioned binary checkpoint.

    Layout: 8-byte magic, uint32 version, uint32 header length, UTF-8 JSON
    header listing ``name``/``shape``/``is_bn`` per entry, then all tensors
    as little-endian float64 in row-major order.
    """
    path = Path(path)
    header = json.dumps(
        {"entries": [{"name": n, "shape": list(t.shape), "is_bn": b} for n, t, b in params]}
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for _, tensor, _ in params:
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return path


def load_params(path: "str | Path") -> ParameterSet:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a silofed checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    entries = []
    for e in header["entries"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        entries.append((e["name"], data, e["is_bn"]))
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return ParameterSet(entries)


def describe_checkpoint(params: ParameterSet) -> List[str]:
    lines = []
    for name, tensor, is_bn in params:
        tag = " [bn]" if is_bn else ""
        lines.append(f"{name:<22} {str(tensor.shape):<12} mean={tensor.mean():.6g}{tag}")
    return lines


def stack_structure_check(sets: Sequence[ParameterSet]) -> None:
    """Raise if the parameter sets are not structurally identical."""
    ref = sets[0].structure()
    for k, ps in enumerate(sets[1:], start=1):
        if ps.structure() != ref:
            raise ValueError(f"parameter set {k} differs structurally from set 0")
