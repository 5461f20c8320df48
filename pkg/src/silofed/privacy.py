"""Local differential privacy: per-example clipping, Gaussian noise, accounting.

The accountant uses the simplified subsampled-Gaussian Renyi bound

    eps(alpha) = T * alpha * q**2 / sigma**2 + log(1 / delta) / (alpha - 1)

minimised over a set of Renyi orders.  It is an approximation that is only
trustworthy for small sampling rates and ``sigma >= 1``; outside that regime
:func:`check_regime` warns.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence, Tuple

import numpy as np

from silofed.nncore import GradientSet, gradient_norm

# Renyi orders 1.01, 1.02, ..., 256.00
_DEFAULT_ORDER_ARRAY = np.round(1.01 + 0.01 * np.arange(25500), 2)
DEFAULT_ORDERS: Tuple[float, ...] = tuple(_DEFAULT_ORDER_ARRAY.tolist())


@dataclass(frozen=True)
class PrivacySpec:
    """Clip norm ``S``, noise multiplier ``sigma`` (noise stddev ``sigma * S``),
    target ``delta`` and the epsilon budget after which a silo stops."""

    clip_norm: float = 12.0
    noise_multiplier: float = 1.4
    delta: float = 1e-5
    epsilon_budget: float = 8.0
    accountant: str = "rdp_bound"

    def __post_init__(self) -> None:
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not (self.noise_multiplier >= 0 and math.isfinite(self.noise_multiplier)):
            raise ValueError(f"noise_multiplier must be finite and >= 0, got {self.noise_multiplier}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if not self.epsilon_budget > 0:
            raise ValueError(f"epsilon_budget must be > 0, got {self.epsilon_budget}")
        if self.accountant != "rdp_bound":
            raise ValueError(f"unknown accountant {self.accountant!r}")

    @property
    def noise_std(self) -> float:
        return 0.0 if self.noise_multiplier == 0 else self.noise_multiplier * self.clip_norm


@dataclass(frozen=True)
class AccountantState:
    """Privacy bookkeeping for one silo."""

    sampling_rate: float
    noise_multiplier: float
    steps: int = 0
    orders: Tuple[float, ...] = DEFAULT_ORDERS

    def __post_init__(self) -> None:
        if not (0.0 < self.sampling_rate <= 1.0):
            raise ValueError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.orders or min(self.orders) <= 1.0:
            raise ValueError("Renyi orders must all exceed 1")


def check_regime(spec: PrivacySpec, sampling_rate: float, max_rate: float = 0.1) -> bool:
    """Warn when the simplified bound is outside its regime of validity."""
    ok = spec.noise_multiplier >= 1.0 and sampling_rate <= max_rate
    if not ok:
        warnings.warn(
            f"RDP bound is loose outside q <= {max_rate}, sigma >= 1 "
            f"(q={sampling_rate:.4g}, sigma={spec.noise_multiplier:.4g})",
            stacklevel=2,
        )
    return ok


def account_step(state: AccountantState) -> AccountantState:
    return replace(state, steps=state.steps + 1)


def epsilon(state: AccountantState, delta: float) -> float:
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if state.steps == 0:
        return 0.0
    if state.noise_multiplier == 0:
        return math.inf
    slope = state.steps * state.sampling_rate**2 / state.noise_multiplier**2
    tail = math.log(1.0 / delta)
    if state.orders is DEFAULT_ORDERS:
        orders = _DEFAULT_ORDER_ARRAY
    else:
        orders = np.sort(np.asarray(state.orders, dtype=np.float64))
    # convex in alpha: the grid minimum sits next to the continuous optimum
    best = 1.0 + math.sqrt(tail / slope)
    i = int(np.searchsorted(orders, best))
    cand = orders[max(i - 1, 0) : i + 1]
    return float(np.min(slope * cand + tail / (cand - 1.0)))


def budget_exhausted(state: AccountantState, spec: PrivacySpec) -> bool:
    if math.isinf(spec.epsilon_budget):
        return False
    return epsilon(state, spec.delta) >= spec.epsilon_budget


def can_step(state: AccountantState, spec: PrivacySpec) -> bool:
    """True if one more noisy step keeps epsilon within the budget."""
    if math.isinf(spec.epsilon_budget):
        return True
    return epsilon(account_step(state), spec.delta) <= spec.epsilon_budget


def clip(gradient: Mapping[str, np.ndarray], clip_norm: float) -> GradientSet:
    """Scale the whole gradient so its global L2 norm is at most ``clip_norm``."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    norm = gradient_norm(gradient)
    if norm <= clip_norm:
        return dict(gradient)
    factor = clip_norm / norm
    return {name: g * factor for name, g in gradient.items()}


def privatize_stacked(
    per_example: Mapping[str, np.ndarray], spec: PrivacySpec, rng: np.random.Generator
) -> GradientSet:
    """Clip, sum, noise and average gradients that carry a leading example axis."""
    names = list(per_example)
    n = per_example[names[0]].shape[0]
    if n == 0:
        raise ValueError("no per-example gradients")
    sq = np.zeros(n)
    for name in names:
        sq += np.square(per_example[name]).reshape(n, -1).sum(axis=1)
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        factor = np.minimum(1.0, np.where(norms > 0, spec.clip_norm / norms, 1.0))
    std = spec.noise_std
    out = {}
    for name in names:
        g = per_example[name]
        total = np.tensordot(factor, g, axes=(0, 0)) if np.any(factor != 1.0) else g.sum(axis=0)
        if std > 0:
            total = total + rng.normal(0.0, std, size=total.shape)
        out[name] = total / n
    return out


def privatize(
    per_example: Sequence[Mapping[str, np.ndarray]], spec: PrivacySpec, rng: np.random.Generator
) -> GradientSet:
    """The local mechanism applied to one minibatch of per-example gradients."""
    if not per_example:
        raise ValueError("no per-example gradients")
    stacked = {name: np.stack([g[name] for g in per_example]) for name in per_example[0]}
    return privatize_stacked(stacked, spec, rng)


def steps_until_exhausted(
    spec: PrivacySpec, sampling_rate: float, already: int = 0, limit: int = 10_000_000
) -> int:
    """How many more noisy steps fit in the budget after ``already`` steps."""
    if math.isinf(spec.epsilon_budget):
        return limit
    state = AccountantState(sampling_rate, spec.noise_multiplier)

    def fits(extra: int) -> bool:
        return epsilon(replace(state, steps=already + extra), spec.delta) <= spec.epsilon_budget

    if not fits(1):
        return 0
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
        if hi > limit:
            return limit
    # fits(lo) and not fits(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo
