"""Coil-level aggregation, stacking and leave-coils-out fold planning."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .data import BROKEN, MEASURED, N_CHANNELS
from .errors import ContractViolation, TrainingDegeneracyError
from .forest import ForestParams, fit_forest, forest_proba
from .metrics import compute_metrics
from .models import predict_proba

log = logging.getLogger(__name__)

META_FEATURES = ("fcn_min", "fcn_std", "fcn_mean", "cnn_prob")


def aggregate_coil(channel_probs, expected=N_CHANNELS):
    """(min, population std, mean) of one coil's channel probabilities."""
    p = np.asarray(channel_probs, dtype=np.float64)
    if p.ndim != 1 or len(p) != expected:
        raise ContractViolation(f"expected {expected} channel probabilities, got {p.shape}")
    return float(p.min()), float(p.std()), float(p.mean())


@dataclass(frozen=True)
class MetaFeatureRow:
    coil_id: str
    fcn_min: float
    fcn_std: float
    fcn_mean: float
    cnn_prob: float
    label: int

    def features(self):
        return (self.fcn_min, self.fcn_std, self.fcn_mean, self.cnn_prob)


def channel_normal_probs(fcn_model, dataset):
    """Per-row probability that the channel is normal."""
    if len(dataset.features) == 0:
        return np.empty(0)
    return 1.0 - predict_proba(fcn_model, dataset.features)


def coil_channel_stats(normal_probs, dataset):
    """Per coil: (min, std, mean) of normal-class channel probabilities.

    Statistics are taken per measurement event, then averaged over a coil's
    events.
    """
    events = defaultdict(lambda: np.full(N_CHANNELS, np.nan))
    for p, cid, ev, ch in zip(normal_probs, dataset.channel_coil, dataset.channel_event, dataset.channel_index):
        events[cid, int(ev)][ch] = p
    per_coil = defaultdict(list)
    for (cid, _), probs in sorted(events.items()):
        per_coil[cid].append(aggregate_coil(probs))
    return {cid: tuple(np.mean(stats, axis=0).tolist()) for cid, stats in per_coil.items()}


def coil_cnn_probs(cnn_model, dataset):
    """Per coil: mean broken-class probability over its measured NCMs."""
    keep = dataset.ncm_provenance == MEASURED
    if not keep.any():
        return {}
    probs = predict_proba(cnn_model, dataset.matrices[keep][:, None])
    per_coil = defaultdict(list)
    for cid, p in zip(dataset.ncm_coil[keep], probs):
        per_coil[cid].append(p)
    return {cid: float(np.mean(v)) for cid, v in per_coil.items()}


def assemble_meta_rows(channel_stats, cnn_probs, coil_labels):
    rows = []
    skipped = 0
    for cid in sorted(coil_labels):
        if cid not in channel_stats or cid not in cnn_probs:
            skipped += 1
            continue
        mn, sd, mean = channel_stats[cid]
        rows.append(MetaFeatureRow(cid, mn, sd, mean, cnn_probs[cid], coil_labels[cid]))
    if skipped:
        log.info("skipped %d coil(s) lacking one data level", skipped)
    return rows


def build_meta_features(fcn_model, cnn_model, dataset, fold):
    """One :class:`MetaFeatureRow` per coil of ``dataset`` in id order."""
    for name, m in (("FCN", fcn_model), ("CNN", cnn_model)):
        if m.fold != fold:
            raise ContractViolation(f"{name} model was trained for fold {m.fold}, not fold {fold}")
    stats = coil_channel_stats(channel_normal_probs(fcn_model, dataset), dataset)
    return assemble_meta_rows(stats, coil_cnn_probs(cnn_model, dataset), dataset.coil_labels())


def meta_matrix(rows):
    X = np.array([r.features() for r in rows], dtype=np.float64).reshape(-1, len(META_FEATURES))
    y = np.array([r.label for r in rows], dtype=np.int64)
    return X, y


# ----------------------------------------------------------------- splitting


def stratified_split(ids, labels, fraction, rng):
    """Split ``ids`` so the first part holds ``round(fraction * n)`` items, stratified by label.

    Per-class shares are allotted by largest remainder, so the first part
    deviates from the exact fraction by less than one item.
    """
    ids = list(ids)
    labels = list(labels)
    n_first = int(round(fraction * len(ids)))
    classes = sorted(set(labels))
    groups = {c: [i for i, l in zip(ids, labels) if l == c] for c in classes}
    exact = {c: fraction * len(groups[c]) for c in classes}
    take = {c: int(np.floor(exact[c])) for c in classes}
    rest = n_first - sum(take.values())
    for c in sorted(classes, key=lambda c: (-(exact[c] - take[c]), c))[:max(rest, 0)]:
        take[c] += 1
    first, second = [], []
    for c in classes:
        members = [groups[c][i] for i in rng.permutation(len(groups[c]))]
        first += members[: take[c]]
        second += members[take[c]:]
    return sorted(first), sorted(second)


@dataclass(frozen=True)
class Fold:
    index: int
    test: tuple
    base_train: tuple
    tune: tuple

    @property
    def fit(self):
        return tuple(sorted(self.base_train + self.tune))


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    seed: int

    def assignment(self):
        """coil_id -> index of the fold that tests it."""
        return {cid: f.index for f in self.folds for cid in f.test}

    def check(self):
        seen = set()
        for f in self.folds:
            test = set(f.test)
            if test & set(f.fit):
                raise ContractViolation(f"fold {f.index}: coils in both fit and test")
            if set(f.base_train) & set(f.tune):
                raise ContractViolation(f"fold {f.index}: coils in both base-train and tune")
            if test & seen:
                raise ContractViolation(f"fold {f.index}: coil tested twice")
            seen |= test
        return self


def group_kfold(coil_labels, k=10, seed=0, tune_fraction=0.3):
    """Deal coils into ``k`` test folds, broken coils first, round-robin.

    ``coil_labels`` maps coil id to label. Each fold's fit set (all other
    coils) is split base-train/tune by label-stratified coil sampling.
    """
    coil_labels = dict(coil_labels)
    if k < 2:
        raise ContractViolation("need at least 2 folds")
    if k > len(coil_labels):
        raise ContractViolation(f"{k} folds requested for only {len(coil_labels)} coils")
    ids = sorted(coil_labels)
    broken = [c for c in ids if coil_labels[c] == BROKEN]
    if not broken:
        raise ContractViolation("fold planning needs at least one broken coil")
    normal = [c for c in ids if coil_labels[c] != BROKEN]
    rng = np.random.default_rng(seed)
    order = [broken[i] for i in rng.permutation(len(broken))] + [normal[i] for i in rng.permutation(len(normal))]
    tests = [sorted(order[i::k]) for i in range(k)]
    folds = []
    for i, test in enumerate(tests):
        held = set(test)
        fit = [c for c in ids if c not in held]
        tune, base = stratified_split(fit, [coil_labels[c] for c in fit], tune_fraction, rng)
        folds.append(Fold(i, tuple(test), tuple(base), tuple(tune)))
    return FoldPlan(tuple(folds), seed).check()


# ------------------------------------------------------------------ stacking


@dataclass
class StackedModel:
    forest: object
    fit_rows: list
    holdout_rows: list
    holdout_metrics: object

    def predict_proba(self, rows):
        X, _ = meta_matrix(rows)
        return forest_proba(self.forest, X) if len(X) else np.empty(0)

    def predict(self, rows):
        return (self.predict_proba(rows) >= 0.5).astype(np.int64)


def stacked_fit(rows, params: ForestParams = ForestParams(), split_seed=0) -> StackedModel:
    """Fit the meta forest on a label-stratified half of ``rows``; score it on the other half."""
    rows = list(rows)
    labels = [r.label for r in rows]
    if len(set(labels)) < 2:
        raise TrainingDegeneracyError("meta-features hold a single class")
    if min(labels.count(0), labels.count(1)) < 2:
        raise ContractViolation("stacking needs at least 2 rows of each class")
    by_id = {r.coil_id: r for r in rows}
    if len(by_id) != len(rows):
        raise ContractViolation("meta rows must have unique coil ids")
    rng = np.random.default_rng(split_seed)
    fit_ids, hold_ids = stratified_split(sorted(by_id), [by_id[c].label for c in sorted(by_id)], 0.5, rng)
    fit_rows = [by_id[c] for c in fit_ids]
    hold_rows = [by_id[c] for c in hold_ids]
    X, y = meta_matrix(fit_rows)
    forest = fit_forest(X, y, params)
    model = StackedModel(forest, fit_rows, hold_rows, None)
    model.holdout_metrics = compute_metrics(model.predict(hold_rows), [r.label for r in hold_rows])
    return model
