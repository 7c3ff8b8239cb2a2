import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndconv.density import SynthConfig, generate_dataset
from ndconv.errors import ConfigError, NumericalError
from ndconv.model import ModelConfig, build_model
from ndconv.train import (
    CheckpointError, TrainConfig, checkpoint_load, checkpoint_save, count_metrics, evaluate,
    loss_and_grads, nd_weight, split_dataset, total_loss, train,
)
from ndconv.deform import GridGeometry


def small(final="ndconv", seed=0, dtype=np.float64):
    return build_model(ModelConfig(widths=(4, 4), dilation=2, final=final, seed=seed), dtype)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SynthConfig(size=(24, 24), heads=(1, 6), radius=(1.5, 3.0)), 10)


def test_plain_and_ndconv_first_forward_identical(rng):
    x = rng.standard_normal((2, 1, 24, 24))
    a = small("plain").predict(x)[0]
    b, off = small("ndconv").predict(x)
    assert np.array_equal(a, b)
    assert not off.any()


def test_same_seed_same_params():
    a, b = small(seed=3), small(seed=3)
    for name, p in a.params.items():
        assert np.array_equal(p.value, b.params.value(name))
    assert not np.array_equal(a.params.value("stage0.weight"), small(seed=4).params.value("stage0.weight"))


def test_default_model_output_shape(rng):
    model = build_model(ModelConfig())
    out, off = model.predict(rng.standard_normal((1, 1, 96, 96)).astype(np.float32))
    assert out.shape == (1, 1, 96, 96)
    assert off.shape == (1, 18, 96, 96)


@pytest.mark.parametrize("kind", ["plain", "dconv", "ndconv", "ndconv-corner"])
def test_model_gradient_matches_finite_differences(kind, rng):
    model = small(kind)
    x = rng.standard_normal((1, 1, 8, 8))
    y = np.abs(rng.standard_normal((1, 1, 8, 8)))
    # move the offset predictor off its zero init so every path is active
    if model.config.deformable:
        model.params["offset.weight"].value[:] = 0.05 * rng.standard_normal((18, 4, 3, 3))
        model.params["offset.bias"].value[:] = 0.3
    lam = nd_weight(model.config, 0.5)
    model.params.zero_grad()
    loss_and_grads(model, x, y, lam)
    for name in ("stage0.weight", "final.weight") + (("offset.weight",) if model.config.deformable else ()):
        grad = model.params[name].grad.copy()
        value = model.params[name].value
        idx = tuple(rng.integers(0, s) for s in value.shape)
        h = 1e-6
        old = value[idx]

        def f():
            pred, off, _ = model.forward(x)
            return total_loss(pred, y, off, lam, model.geometry, kind == "ndconv-corner")

        value[idx] = old + h
        up = f()
        value[idx] = old - h
        down = f()
        value[idx] = old
        assert grad[idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8), name


def test_total_loss_cases():
    g = GridGeometry(1)
    pred, target = np.full((1, 1, 2, 2), 0.5), np.zeros((1, 1, 2, 2))
    off = np.zeros((1, 18, 2, 2))
    off[:, 8:10] = [[[0.5]], [[-0.5]]]  # center tap drift gives NDloss 2.5
    assert total_loss(pred, target, off, 0.0, g) == pytest.approx(0.5)
    assert total_loss(target, target, np.zeros_like(off), 1.0, g) == 0.0
    assert total_loss(pred, target, off, 1e-3, g) == pytest.approx(0.5 + 2.5e-3, abs=1e-15)
    # unit density loss plus a unit center drift, whose NDloss is 5
    one = np.ones((1, 1, 1, 1))
    unit = np.zeros((1, 18, 1, 1))
    unit[0, 8, 0, 0] = 1.0
    assert total_loss(one * np.sqrt(2), 0 * one, unit, 1e-3, g) == pytest.approx(1.0 + 1e-3 * 5.0, abs=1e-12)


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        total_loss(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)), None, -1.0, GridGeometry(1))
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1.0).validate()


def test_zero_learning_rate_keeps_params(scenes):
    model = small()
    before = {n: p.value.copy() for n, p in model.params.items()}
    train(model, scenes, TrainConfig(lr=0.0, steps=3, eval_interval=3))
    for n, p in model.params.items():
        assert np.array_equal(p.value, before[n])


def test_density_loss_decreases(scenes):
    model = small("plain")
    res = train(model, scenes, TrainConfig(lr=3e-3, steps=40, eval_interval=10))
    assert res.log[-1]["l_den"] < res.log[0]["l_den"]


def test_lambda_zero_matches_dconv_gradients(scenes, rng):
    x = rng.standard_normal((2, 1, 12, 12))
    y = np.abs(rng.standard_normal((2, 1, 12, 12)))
    grads = []
    for kind in ("dconv", "ndconv"):
        m = small(kind)
        m.params["offset.bias"].value[:] = 0.2
        loss_and_grads(m, x, y, lam=0.0)
        grads.append({n: p.grad.copy() for n, p in m.params.items()})
    for n in grads[0]:
        assert np.array_equal(grads[0][n], grads[1][n]), n


def test_dconv_ignores_lambda(scenes):
    a = train(small("dconv"), scenes, TrainConfig(lam=0.5, steps=4, eval_interval=2, lr=1e-3)).log
    b = train(small("ndconv"), scenes, TrainConfig(lam=0.0, steps=4, eval_interval=2, lr=1e-3)).log
    assert a == b


def test_split_is_last_fifth():
    train_set, val = split_dataset(list(range(10)))
    assert train_set == list(range(8)) and val == [8, 9]
    assert split_dataset([0]) == ([0], [])


def test_count_metrics_hand_values():
    m = count_metrics([10, 20], [12, 16])
    assert m.mae == 3.0 and m.n == 2
    assert m.mse == pytest.approx(math.sqrt(10), abs=1e-15)
    assert count_metrics([3, 4], [3, 4]).mse == 0.0
    m = count_metrics([4.0, 0.0], [1.0, 1.0])
    assert m.mae == 2.0 and m.mse == pytest.approx(math.sqrt(5.0))
    single = count_metrics([7.5], [3.0])
    assert single.mae == single.mse == 4.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-10 ** 6, 10 ** 6).map(lambda k: k / 1000), min_size=1, max_size=30))
def test_mae_never_exceeds_rms(errors):
    m = count_metrics(errors, [0.0] * len(errors))
    assert m.mae <= m.mse * (1 + 1e-12)


def test_empty_evaluation_rejected():
    with pytest.raises(ConfigError):
        count_metrics([], [])


def test_evaluate_counts_predicted_mass(scenes):
    model = small("plain")
    metrics = evaluate(model, scenes[:3])
    preds = [model.predict(s.image)[0].sum() for s in scenes[:3]]
    expected = count_metrics(preds, [s.annotation.count for s in scenes[:3]])
    assert metrics.mae == pytest.approx(expected.mae, rel=1e-12)
    assert metrics.n == 3


def test_checkpoint_round_trip(tmp_path, scenes):
    model = small(dtype=np.float32)
    res = train(model, scenes, TrainConfig(steps=3, eval_interval=3, lr=1e-3))
    path = tmp_path / "m.ckpt"
    checkpoint_save(path, model, TrainConfig(steps=3), res.state, {"note": "x"})
    ck = checkpoint_load(path)
    assert ck.model.config == model.config
    assert ck.state == res.state and ck.extra == {"note": "x"}
    assert ck.train.steps == 3
    for name, p in model.params.items():
        q = ck.model.params[name]
        assert np.array_equal(p.value, q.value) and np.array_equal(p.m, q.m) and np.array_equal(p.v, q.v)
        assert p.step == q.step


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT\n{}")
    with pytest.raises(CheckpointError) as info:
        checkpoint_load(path)
    assert info.value.offset == 0
    checkpoint_save(path, small())
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointError) as info:
        checkpoint_load(path)
    assert 0 < info.value.offset < len(raw)


def test_resume_reproduces_trajectory(tmp_path, scenes):
    cfg = TrainConfig(steps=6, eval_interval=2, lr=1e-3, lam=1e-2)
    full = train(small(dtype=np.float32), scenes, cfg)
    path = tmp_path / "half.ckpt"
    half_cfg = TrainConfig(steps=4, eval_interval=2, lr=1e-3, lam=1e-2)
    first = train(small(dtype=np.float32), scenes, half_cfg, checkpoint_path=path)
    ck = checkpoint_load(path)
    rest = train(ck.model, scenes, cfg, state=ck.state)
    assert first.log + rest.log == full.log
    for name, p in full.model.params.items():
        assert np.array_equal(p.value, rest.model.params.value(name))


def test_nan_input_aborts(scenes):
    bad = generate_dataset(SynthConfig(size=(24, 24), heads=(1, 2), radius=(1.5, 3.0)), 4)
    for s in bad:
        s.image = s.image.copy()
        s.image[0, 0, 3, 3] = np.nan
    with pytest.raises(NumericalError):
        train(small(), bad, TrainConfig(steps=2))


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        train(small(), [], TrainConfig(steps=1))
