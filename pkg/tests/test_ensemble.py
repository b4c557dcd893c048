import logging
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coilstack import models
from coilstack.data import AUGMENTED, BROKEN, NORMAL, SyntheticSpec, generate_synthetic
from coilstack.ensemble import (
    META_FEATURES,
    MetaFeatureRow,
    aggregate_coil,
    assemble_meta_rows,
    build_meta_features,
    coil_channel_stats,
    coil_cnn_probs,
    group_kfold,
    stacked_fit,
    stratified_split,
)
from coilstack.errors import ContractViolation, TrainingDegeneracyError
from coilstack.forest import ForestParams


def test_aggregate_constant():
    assert aggregate_coil([0.5] * 20) == (0.5, 0.0, 0.5)


def test_aggregate_hand_computed():
    mn, sd, mean = aggregate_coil([0.2, 0.4, 0.6], expected=3)
    assert mn == pytest.approx(0.2)
    assert sd == pytest.approx((2 / 75) ** 0.5)
    assert round(sd, 5) == 0.16330
    assert mean == pytest.approx(0.4)


def test_aggregate_wrong_count():
    with pytest.raises(ContractViolation):
        aggregate_coil([0.5] * 19)


@given(st.lists(st.floats(0, 1), min_size=20, max_size=20), st.integers(0, 19), st.floats(0, 1))
def test_aggregate_order_and_monotonicity(probs, i, drop):
    mn, sd, mean = aggregate_coil(probs)
    assert mn <= mean + 1e-12 and mean <= max(probs) + 1e-12 and sd >= 0
    lowered = list(probs)
    lowered[i] = min(probs[i], drop)
    assert aggregate_coil(lowered)[0] <= mn


def test_channel_stats_average_over_events():
    ds = generate_synthetic(SyntheticSpec(coils=3, broken_fraction=0.0, channel_events_per_coil=2, seed=1))
    probs = np.where(ds.channel_event == 0, 0.2, 0.6)
    probs[(ds.channel_event == 1) & (ds.channel_index == 0)] = 0.0
    stats = coil_channel_stats(probs, ds)
    assert set(stats) == set(ds.coil_ids())
    for mn, sd, mean in stats.values():
        # event 0 -> (0.2, 0, 0.2); event 1 -> (0, std, 0.57)
        assert mn == pytest.approx(0.1)
        assert mean == pytest.approx((0.2 + 0.6 * 19 / 20) / 2)
        assert sd == pytest.approx(np.std([0.0] + [0.6] * 19) / 2)


def _tiny_models(fold):
    fcn = models.TrainedModel(models.build_fcn(), models.Network(models.build_fcn(), np.random.default_rng(0)),
                              models.TrainConfig(), fold=fold)
    cnn_spec = models.build_cnn("cnn1")
    cnn = models.TrainedModel(cnn_spec, models.Network(cnn_spec, np.random.default_rng(1)), models.TrainConfig(), fold=fold)
    return fcn, cnn


def test_meta_rows_one_per_coil_in_fixed_order():
    ds = generate_synthetic(SyntheticSpec(coils=12, broken_fraction=0.3, seed=2))
    fcn, cnn = _tiny_models(fold=3)
    rows = build_meta_features(fcn, cnn, ds, fold=3)
    assert [r.coil_id for r in rows] == ds.coil_ids()
    labels = ds.coil_labels()
    for r in rows:
        assert r.fcn_min <= r.fcn_mean + 1e-12 and r.fcn_std >= 0
        assert len(r.features()) == len(META_FEATURES) == 4
        assert r.label == labels[r.coil_id]


def test_meta_rows_fold_guard():
    ds = generate_synthetic(SyntheticSpec(coils=5, seed=2))
    fcn, cnn = _tiny_models(fold=1)
    with pytest.raises(ContractViolation):
        build_meta_features(fcn, cnn, ds, fold=2)


def test_cnn_probs_ignore_augmented():
    ds = generate_synthetic(SyntheticSpec(coils=4, broken_fraction=0.5, seed=3))
    _, cnn = _tiny_models(fold=None)
    base = coil_cnn_probs(cnn, ds)
    measured = list(ds.ncm_samples())
    aug = ds.with_ncms(measured + [replace(measured[0], matrix=measured[0].matrix * 3, provenance=AUGMENTED)])
    assert coil_cnn_probs(cnn, aug) == base


def test_skipped_coils_are_logged(caplog):
    with caplog.at_level(logging.INFO):
        rows = assemble_meta_rows({"a": (0.0, 0.0, 0.0)}, {"a": 0.0, "b": 0.3}, {"a": 1, "b": 0})
    assert rows == [MetaFeatureRow("a", 0.0, 0.0, 0.0, 0.0, 1)]
    assert "skipped 1" in caplog.text


# ------------------------------------------------------------- folds


def _labels(n, n_broken, rng):
    ids = [f"c{i:04d}" for i in range(n)]
    broken = set(rng.choice(n, size=n_broken, replace=False).tolist())
    return {cid: BROKEN if i in broken else NORMAL for i, cid in enumerate(ids)}


def test_kfold_partition():
    labels = _labels(100, 10, np.random.default_rng(0))
    plan = group_kfold(labels, k=10, seed=0)
    tests = [set(f.test) for f in plan.folds]
    assert all(len(t) == 10 for t in tests)
    assert set().union(*tests) == set(labels)
    assert sum(len(t) for t in tests) == 100
    for f in plan.folds:
        assert not set(f.test) & set(f.fit)
        assert set(f.fit) | set(f.test) == set(labels)


def test_kfold_balances_broken_coils():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_broken = int(rng.integers(10, 40))
        labels = _labels(int(rng.integers(100, 300)), n_broken, rng)
        plan = group_kfold(labels, k=10, seed=seed)
        counts = [sum(labels[c] for c in f.test) for f in plan.folds]
        assert max(counts) - min(counts) <= 1
        assert max(counts) < n_broken


def test_fit_tune_split_is_70_30():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        labels = _labels(int(rng.integers(30, 400)), int(rng.integers(3, 30)), rng)
        for f in group_kfold(labels, k=10, seed=seed).folds:
            n_fit = len(f.fit)
            assert abs(len(f.base_train) - 0.7 * n_fit) <= 1
            assert abs(len(f.tune) - 0.3 * n_fit) <= 1
            broken_fit = sum(labels[c] for c in f.fit)
            assert abs(sum(labels[c] for c in f.tune) - 0.3 * broken_fit) < 1


def test_kfold_errors():
    with pytest.raises(ContractViolation):
        group_kfold({"a": 1, "b": 0}, k=3)
    with pytest.raises(ContractViolation):
        group_kfold({f"c{i}": 0 for i in range(20)}, k=10)


def test_kfold_deterministic():
    labels = _labels(60, 6, np.random.default_rng(1))
    assert group_kfold(labels, seed=4) == group_kfold(labels, seed=4)
    assert group_kfold(labels, seed=4) != group_kfold(labels, seed=5)


@settings(max_examples=50)
@given(st.integers(1, 60), st.integers(1, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_stratified_split_sizes(n0, n1, frac, seed):
    ids = [f"x{i}" for i in range(n0 + n1)]
    labels = [0] * n0 + [1] * n1
    first, second = stratified_split(ids, labels, frac, np.random.default_rng(seed))
    assert sorted(first + second) == sorted(ids)
    assert len(first) == round(frac * len(ids))
    assert abs(sum(1 for i in first if int(i[1:]) >= n0) - frac * n1) < 1 + 1e-9


# ------------------------------------------------------------- stacking


def _rows(n, n_broken, rng, separable=False):
    rows = []
    for i in range(n):
        y = int(i < n_broken)
        f = rng.uniform(size=4)
        if separable:
            f = np.full(4, 0.9 if y else 0.1)
        rows.append(MetaFeatureRow(f"c{i:03d}", *f.tolist(), y))
    return rows


def test_stacked_split_arithmetic():
    model = stacked_fit(_rows(100, 20, np.random.default_rng(0)), ForestParams(n_trees=5), split_seed=1)
    assert len(model.fit_rows) == 50
    assert sum(r.label for r in model.fit_rows) == 10
    assert not {r.coil_id for r in model.fit_rows} & {r.coil_id for r in model.holdout_rows}


def test_stacked_separable():
    model = stacked_fit(_rows(40, 10, np.random.default_rng(0), separable=True), ForestParams(n_trees=3))
    assert model.holdout_metrics.f_score == 1.0


def test_stacked_determinism():
    rows = _rows(60, 15, np.random.default_rng(2))
    a = stacked_fit(rows, ForestParams(n_trees=4, seed=1), split_seed=7)
    b = stacked_fit(rows, ForestParams(n_trees=4, seed=1), split_seed=7)
    assert a.fit_rows == b.fit_rows and a.forest.trees == b.forest.trees


def test_stacked_errors():
    with pytest.raises(TrainingDegeneracyError):
        stacked_fit(_rows(10, 0, np.random.default_rng(0)))
    with pytest.raises(ContractViolation):
        stacked_fit(_rows(10, 1, np.random.default_rng(0)))
