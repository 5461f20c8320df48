import numpy as np
import pytest

from silofed.nncore import Batch, ModelSpec


def random_batch(rng: np.random.Generator, n: int, dim: int) -> Batch:
    return Batch(rng.normal(size=(n, dim)), rng.normal(loc=3.0, size=n))


def jitter(params, rng, scale=0.1):
    """Move every trainable tensor off its initial value (avoids exact ReLU kinks)."""
    return params.replace(
        {n: params[n] + rng.normal(scale=scale, size=params[n].shape) for n in params.trainable_names}
    )


def central_differences(loss_fn, params, h=1e-5):
    """Finite-difference gradient of ``loss_fn`` over every trainable coordinate."""
    out = {}
    for name in params.trainable_names:
        base = params[name]
        g = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            g[idx] = (loss_fn(params.replace({name: plus})) - loss_fn(params.replace({name: minus}))) / (2 * h)
        out[name] = g
    return out


def max_relative_error(analytic, numeric, floor=1e-4):
    """Largest |a - f| / max(|a|, |f|, floor) over all coordinates.

    Coordinates whose exact gradient is zero (a dense bias feeding a
    batch-norm layer) have no meaningful relative error: the difference
    quotient there is pure rounding noise, tens of ulp(loss) / h, observed
    up to about 2e-9.  Below the floor the check is absolute (1e-4 * floor
    = 1e-8), roughly five times that noise.
    """
    worst = 0.0
    for name in analytic:
        a, f = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


@pytest.fixture
def small_spec():
    return ModelSpec(input_dim=4, hidden_layers=((6, True), (5, False)))
