import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from silofed import nncore
from silofed.nncore import Batch, ModelSpec, ParameterSet

from conftest import central_differences, jitter, max_relative_error, random_batch


def test_init_is_deterministic(small_spec):
    a = nncore.init_model(small_spec, 7)
    b = nncore.init_model(small_spec, 7)
    assert a.bitwise_equal(b)
    assert not a.bitwise_equal(nncore.init_model(small_spec, 8))


def test_bn_entries_flagged(small_spec):
    params = nncore.init_model(small_spec, 0)
    assert params.bn_names == ("bn0.gamma", "bn0.beta", "bn0.running_mean", "bn0.running_var")
    two = nncore.init_model(ModelSpec(3, ((4, True), (4, True))), 0)
    assert len(two.bn_names) == 8


def test_parameter_count_by_shape_enumeration():
    params = nncore.init_model(ModelSpec(3, ((4, True),)), 0)
    shapes = {name: t.shape for name, t, _ in params}
    assert shapes == {
        "hidden0.weight": (3, 4),
        "hidden0.bias": (4,),
        "bn0.gamma": (4,),
        "bn0.beta": (4,),
        "bn0.running_mean": (4,),
        "bn0.running_var": (4,),
        "head.weight": (4, 1),
        "head.bias": (1,),
    }
    # 3*4 + 4 dense, 4*4 batch norm, 4*1 + 1 head
    assert params.num_values() == sum(int(np.prod(s)) for s in shapes.values()) == 37


def test_init_values(small_spec):
    params = nncore.init_model(small_spec, 3)
    limit = np.sqrt(6.0 / (4 + 6))
    assert np.all(np.abs(params["hidden0.weight"]) <= limit)
    assert np.all(params["bn0.gamma"] == 1) and np.all(params["bn0.running_var"] == 1)
    assert np.all(params["bn0.beta"] == 0) and np.all(params["bn0.running_mean"] == 0)
    assert np.all(params["hidden0.bias"] == 0)


@pytest.mark.parametrize("layers", [((0, True),), ((4, False), (-1, False))])
def test_invalid_spec(layers):
    with pytest.raises(ValueError):
        ModelSpec(3, layers)


def test_parameterset_is_immutable(small_spec):
    params = nncore.init_model(small_spec, 0)
    with pytest.raises(ValueError):
        params["head.bias"][0] = 1.0


def test_zero_head_predicts_bias(small_spec):
    params = nncore.init_model(small_spec, 0)
    params = params.replace({"head.weight": np.zeros((5, 1)), "head.bias": np.array([2.5])})
    batch = random_batch(np.random.default_rng(0), 6, 4)
    for mode in ("train", "eval"):
        preds, _ = nncore.forward(params, batch, mode)
        assert np.all(preds == 2.5)


def test_eval_forward_is_pure(small_spec):
    params = nncore.init_model(small_spec, 1)
    batch = random_batch(np.random.default_rng(1), 5, 4)
    before = params.flat().copy()
    p1, c1 = nncore.forward(params, batch, "eval")
    p2, _ = nncore.forward(params, batch, "eval")
    assert np.array_equal(p1, p2)
    assert np.array_equal(params.flat(), before)
    assert c1.params is params


def test_train_forward_updates_running_stats(small_spec):
    params = nncore.init_model(small_spec, 1)
    batch = random_batch(np.random.default_rng(1), 8, 4)
    _, cache = nncore.forward(params, batch, "train")
    z = batch.features @ params["hidden0.weight"] + params["hidden0.bias"]
    expected_mean = 0.9 * 0.0 + 0.1 * z.mean(axis=0)
    expected_var = 0.9 * 1.0 + 0.1 * z.var(axis=0, ddof=1)
    assert np.allclose(cache.params["bn0.running_mean"], expected_mean, rtol=0, atol=1e-14)
    assert np.allclose(cache.params["bn0.running_var"], expected_var, rtol=0, atol=1e-14)
    assert np.all(params["bn0.running_mean"] == 0)


def test_duplicate_rows_stay_finite(small_spec):
    params = nncore.init_model(small_spec, 2)
    row = np.random.default_rng(2).normal(size=4)
    batch = Batch(np.tile(row, (6, 1)), np.full(6, 3.0))
    preds, cache = nncore.forward(params, batch, "train")
    assert np.all(np.isfinite(preds))
    assert np.all(cache.params["bn0.running_var"] > 0)
    grads = nncore.backward(params, cache, batch.targets)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_forward_errors(small_spec):
    params = nncore.init_model(small_spec, 0)
    with pytest.raises(ValueError):
        nncore.forward(params, Batch(np.zeros((3, 5)), np.zeros(3)), "eval")
    with pytest.raises(ValueError):
        nncore.forward(params, Batch(np.zeros((1, 4)), np.zeros(1)), "train")
    # a single example is fine in eval mode
    nncore.forward(params, Batch(np.zeros((1, 4)), np.zeros(1)), "eval")


def test_batch_rejects_non_finite():
    with pytest.raises(ValueError):
        Batch(np.array([[np.nan, 1.0]]), np.array([1.0]))


def test_loss_mse_examples():
    assert nncore.loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert nncore.loss_mse([1.0, 3.0], [0.0, 0.0]) == 5.0
    with pytest.raises(ValueError):
        nncore.loss_mse([1.0], [1.0, 2.0])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=40))
def test_loss_mse_matches_naive_sum(pairs):
    preds = [p for p, _ in pairs]
    targets = [t for _, t in pairs]
    total = 0.0
    for p, t in pairs:
        total += (p - t) ** 2
    assert nncore.loss_mse(preds, targets) == pytest.approx(total / len(pairs), rel=1e-12, abs=1e-12)


def test_head_bias_gradient_closed_form(small_spec):
    params = nncore.init_model(small_spec, 4)
    batch = random_batch(np.random.default_rng(4), 7, 4)
    preds, cache = nncore.forward(params, batch, "train")
    grads = nncore.backward(params, cache, batch.targets)
    assert grads["head.bias"][0] == pytest.approx(np.mean(2 * (preds - batch.targets)), abs=1e-12)
    assert set(grads) == set(params.trainable_names)
    assert "bn0.running_mean" not in grads


def _train_loss(batch):
    def fn(p):
        preds, _ = nncore.forward(p, batch, "train")
        return nncore.loss_mse(preds, batch.targets)

    return fn


def test_backward_matches_finite_differences_three_layers():
    spec = ModelSpec(3, ((5, True), (4, True), (3, False)))
    params = jitter(nncore.init_model(spec, 11), np.random.default_rng(0))
    batch = random_batch(np.random.default_rng(11), 9, 3)
    _, cache = nncore.forward(params, batch, "train")
    analytic = nncore.backward(params, cache, batch.targets)
    numeric = central_differences(_train_loss(batch), params)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_eval_convention_backward_matches_finite_differences(small_spec):
    params = jitter(nncore.init_model(small_spec, 5), np.random.default_rng(5))
    params = params.replace(
        {"bn0.running_mean": np.full(6, 0.3), "bn0.running_var": np.full(6, 1.7)}
    )
    batch = random_batch(np.random.default_rng(5), 6, 4)

    def fn(p):
        preds, _ = nncore.forward(p, batch, "eval")
        return nncore.loss_mse(preds, batch.targets)

    _, cache = nncore.forward(params, batch, "eval")
    analytic = nncore.backward(params, cache, batch.targets)
    assert max_relative_error(analytic, central_differences(fn, params)) < 1e-4


def test_per_example_mean_equals_running_stats_batch_gradient(small_spec):
    params = nncore.init_model(small_spec, 6)
    batch = random_batch(np.random.default_rng(6), 10, 4)
    per = nncore.per_example_gradients(params, batch)
    assert len(per) == 10
    _, cache = nncore.forward(params, batch, "eval")
    batch_grad = nncore.backward(params, cache, batch.targets)
    for name, g in batch_grad.items():
        mean = np.mean([p[name] for p in per], axis=0)
        assert np.max(np.abs(mean - g)) < 1e-10


def test_per_example_singleton_and_duplicates(small_spec):
    params = nncore.init_model(small_spec, 6)
    rng = np.random.default_rng(6)
    single = random_batch(rng, 1, 4)
    (only,) = nncore.per_example_gradients(params, single)
    _, cache = nncore.forward(params, single, "eval")
    ref = nncore.backward(params, cache, single.targets)
    for name in ref:
        assert np.array_equal(only[name], ref[name])
    x = rng.normal(size=4)
    dup = Batch(np.stack([x, rng.normal(size=4), x]), np.array([1.0, 2.0, 1.0]))
    per = nncore.per_example_gradients(params, dup)
    for name in per[0]:
        assert np.array_equal(per[0][name], per[2][name])


def test_sgd_step_examples(small_spec):
    params = nncore.init_model(small_spec, 0)
    zeros = {n: np.zeros(params[n].shape) for n in params.trainable_names}
    assert nncore.sgd_step(params, zeros, 0.1).bitwise_equal(params)

    single = ParameterSet([("w", np.array([1.0]), False)])
    assert nncore.sgd_step(single, {"w": np.array([2.0])}, 0.1)["w"][0] == pytest.approx(0.8)

    g = {n: np.full(params[n].shape, 0.25) for n in params.trainable_names}
    halves = nncore.sgd_step(nncore.sgd_step(params, g, 0.05), g, 0.05)
    full = nncore.sgd_step(params, g, 0.1)
    assert np.allclose(halves.flat(), full.flat(), rtol=0, atol=1e-15)
    # running statistics are never touched by the step
    assert np.array_equal(full["bn0.running_var"], params["bn0.running_var"])


def test_sgd_step_errors(small_spec):
    params = nncore.init_model(small_spec, 0)
    good = {n: np.zeros(params[n].shape) for n in params.trainable_names}
    with pytest.raises(ValueError):
        nncore.sgd_step(params, good, 0.0)
    bad = dict(good)
    bad["head.bias"] = np.zeros(2)
    with pytest.raises(ValueError):
        nncore.sgd_step(params, bad, 0.1)


def _sgd_run(spec, seed):
    params = nncore.init_model(spec, seed)
    rng = np.random.default_rng(seed)
    for step in range(5):
        batch = random_batch(rng, 8, spec.input_dim)
        _, cache = nncore.forward(params, batch, "train")
        grads = nncore.backward(params, cache, batch.targets)
        params = nncore.sgd_step(cache.params, grads, 0.05 / (1 + step))
    return params


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), width=st.integers(2, 8), bn=st.booleans())
def test_training_is_deterministic(seed, width, bn):
    spec = ModelSpec(3, ((width, bn), (3, not bn)))
    assert _sgd_run(spec, seed).bitwise_equal(_sgd_run(spec, seed))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12))
def test_gradient_property(seed, n):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(3, ((int(rng.integers(2, 6)), bool(rng.integers(2))), (3, True)))
    params = jitter(nncore.init_model(spec, seed), rng)
    batch = random_batch(rng, n, 3)
    _, cache = nncore.forward(params, batch, "train")
    analytic = nncore.backward(params, cache, batch.targets)
    assert max_relative_error(analytic, central_differences(_train_loss(batch), params)) < 1e-4


def test_checkpoint_round_trip(tmp_path, small_spec):
    params = nncore.init_model(small_spec, 9)
    path = nncore.save_params(params, tmp_path / "m.ckpt")
    loaded = nncore.load_params(path)
    assert loaded.bitwise_equal(params)
    assert loaded.bn_names == params.bn_names


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        nncore.load_params(p)
