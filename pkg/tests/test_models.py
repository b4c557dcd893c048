import numpy as np
import pytest

from coilstack import models
from coilstack.errors import ContractViolation, DimensionError, TrainingDegeneracyError
from coilstack.models import (
    BatchNorm,
    Conv,
    Dense,
    Flatten,
    NetworkSpec,
    TrainConfig,
    build_cnn,
    build_fcn,
    load_model,
    predict_proba,
    save_model,
    train,
)


def toy(rng, n=200):
    x = rng.normal(size=(n, 4))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    x[:, :2] += np.where(y[:, None] == 1, 0.5, -0.5)  # margin
    return x, y


def toy_ncms(rng, n=24):
    x = rng.normal(size=(n, 1, 20, 20))
    y = np.arange(n) % 2
    x[y == 1, 0, :5, :5] += 2.0
    return x, y


@pytest.mark.parametrize("variant, width", [("cnn1", 400), ("cnn2", 800), ("cnn3", 288), ("cnn4", 288)])
def test_flatten_widths(variant, width):
    spec = build_cnn(variant)
    assert spec.flatten_width() == width
    net = models.Network(spec, np.random.default_rng(0))
    out = net.forward(np.random.default_rng(1).normal(size=(3, 1, 20, 20))).data
    assert out.shape == (3, 2)
    np.testing.assert_allclose(out.sum(axis=1), 1.0)


def test_cnn4_shape_chain():
    shapes = build_cnn("cnn4").shapes()
    maps = [s for s in shapes if len(s) == 3]
    distinct = [s for i, s in enumerate(maps) if i == 0 or s != maps[i - 1]]
    assert distinct == [(16, 18, 18), (16, 9, 9), (32, 7, 7), (32, 3, 3)]


def test_cnn3_has_three_dropouts():
    assert sum(isinstance(l, models.Dropout) for l in build_cnn("cnn3").layers) == 3


def test_unknown_variant():
    with pytest.raises(ContractViolation):
        build_cnn("cnn5")


def test_shape_mismatch_is_a_build_failure():
    with pytest.raises(DimensionError):
        NetworkSpec((1, 20, 20), (Conv(4), Dense(2), models.Activation("softmax")))
    with pytest.raises(DimensionError):
        NetworkSpec((1, 4, 4), (Conv(4, "valid"), models.Pool("max"), models.Pool("max"), Flatten(), Dense(2),
                                models.Activation("softmax")))
    with pytest.raises(ContractViolation):
        NetworkSpec((4,), (Dense(3), models.Activation("softmax")))


def test_fcn_structure():
    spec = build_fcn()
    parameterized = [l for l in spec.layers if isinstance(l, (Dense, BatchNorm))]
    assert len(parameterized) == 9
    assert spec.shapes()[-1] == (2,)
    with pytest.raises(ContractViolation):
        build_fcn((64, 0, 32, 16))


def test_fcn_forward_is_a_distribution():
    net = models.Network(build_fcn(), np.random.default_rng(0))
    out = net.forward(np.random.default_rng(1).normal(size=(5, 4))).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0)


def test_rate_zero_train_and_infer_agree_when_stats_match():
    net = models.Network(build_fcn(dropout_rate=0.0), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(16, 4))
    for _ in range(300):  # converge running stats onto this batch's stats
        train_out = net.forward(x, "train", np.random.default_rng(0)).data
    np.testing.assert_allclose(net.forward(x, "infer").data, train_out, atol=1e-4)


def test_spec_dict_round_trip():
    for spec in [build_fcn()] + [build_cnn(v) for v in models.CNN_VARIANTS]:
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_separable_training():
    rng = np.random.default_rng(0)
    x, y = toy(rng)
    xt, yt = toy(rng, 60)
    cfg = TrainConfig(lr=1e-2, batch_size=32, max_epochs=30, patience=30, seed=1)
    model = train(build_fcn(dropout_rate=0.0), (x, y), (xt, yt), cfg)
    losses = [h["loss"] for h in model.history[:5]]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert ((predict_proba(model, x) >= 0.5) == y).all()
    assert predict_proba(model, x[y == 1][0]) > 0.5


def test_zero_epochs_returns_initial_model():
    rng = np.random.default_rng(0)
    x, y = toy(rng, 20)
    model = train(build_fcn(), (x, y), (x, y), TrainConfig(max_epochs=0, seed=3))
    assert model.history == [] and model.best_epoch is None
    fresh = models.Network(build_fcn(), np.random.default_rng(3))
    assert all((a.data == b.data).all() for a, b in zip(model.network.params, fresh.params))


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    x, y = toy(rng, 80)
    cfg = TrainConfig(batch_size=16, max_epochs=4, seed=5)
    a = train(build_fcn(), (x, y), (x[:30], y[:30]), cfg)
    b = train(build_fcn(), (x, y), (x[:30], y[:30]), cfg)
    assert all((p.data == q.data).all() for p, q in zip(a.network.params, b.network.params))
    assert a.history == b.history


def test_tune_order_invariance():
    rng = np.random.default_rng(1)
    x, y = toy(rng, 80)
    xt, yt = toy(rng, 40)
    perm = rng.permutation(40)
    cfg = TrainConfig(batch_size=16, max_epochs=6, patience=2, seed=2)
    a = train(build_fcn(dropout_rate=0.0), (x, y), (xt, yt), cfg)
    b = train(build_fcn(dropout_rate=0.0), (x, y), (xt[perm], yt[perm]), cfg)
    assert a.best_epoch == b.best_epoch
    assert all((p.data == q.data).all() for p, q in zip(a.network.params, b.network.params))


def test_early_stopping_keeps_the_best_epoch():
    rng = np.random.default_rng(2)
    x, y = toy(rng, 60)
    y = np.where(rng.random(60) < 0.3, 1 - y, y)  # noisy labels make tune F wander
    xt, yt = toy(rng, 40)
    model = train(build_fcn(), (x, y), (xt, yt), TrainConfig(batch_size=8, max_epochs=15, patience=3, seed=0))
    final_f = model.history[-1]["tune_f"]
    best_f = models.f_score((predict_proba(model, xt) >= 0.5).astype(int), yt)
    assert best_f == model.history[model.best_epoch]["tune_f"]
    assert best_f >= final_f
    assert len(model.history) - 1 - model.best_epoch <= 3


def test_single_class_training_rejected():
    x = np.zeros((10, 4))
    with pytest.raises(TrainingDegeneracyError):
        train(build_fcn(), (x, np.zeros(10)), (x, np.zeros(10)), TrainConfig(max_epochs=1))


def test_train_config_contract():
    with pytest.raises(ContractViolation):
        TrainConfig(batch_size=1)
    with pytest.raises(ContractViolation):
        TrainConfig(patience=0)


def test_predict_proba_contract():
    model = train(build_fcn(), (np.eye(4), [0, 1, 0, 1]), (np.eye(4), [0, 1, 0, 1]), TrainConfig(max_epochs=0))
    p = predict_proba(model, np.ones(4))
    assert isinstance(p, float) and 0 <= p <= 1
    assert predict_proba(model, np.ones(4)) == p
    with pytest.raises(DimensionError):
        predict_proba(model, np.ones(5))


def test_cnn_trains_on_toy_ncms():
    rng = np.random.default_rng(0)
    x, y = toy_ncms(rng)
    model = train(build_cnn("cnn1"), (x, y), (x, y), TrainConfig(lr=5e-3, batch_size=8, max_epochs=8, patience=8))
    assert model.history[-1]["loss"] < model.history[0]["loss"]


@pytest.mark.parametrize("variant", ["fcn", "cnn3"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, variant):
    from coilstack.preprocessing import fit_normalizer

    rng = np.random.default_rng(0)
    if variant == "fcn":
        x, y = toy(rng, 40)
        spec, norm = build_fcn(), fit_normalizer(x)
    else:
        x, y = toy_ncms(rng, 12)
        spec, norm = build_cnn("cnn3"), None
    model = train(spec, (x, y), (x, y), TrainConfig(batch_size=4, max_epochs=2, seed=1), normalizer=norm, fold=4)
    path = tmp_path / "m.npz"
    save_model(model, path)
    back = load_model(path)
    assert back.spec == model.spec and back.config == model.config and back.fold == 4
    assert back.history == model.history and back.best_epoch == model.best_epoch
    assert (predict_proba(back, x) == predict_proba(model, x)).all()
