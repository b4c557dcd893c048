"""Binary classification metrics with broken as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ContractViolation

METRIC_NAMES = ("accuracy", "precision", "recall", "f_score")


@dataclass(frozen=True)
class Metrics:
    """Counts, derived scores and row-normalized confusion rates (in percent).

    Row rates: tn_rate + fp_rate = 100 over true negatives, fn_rate + tp_rate
    = 100 over true positives; an empty row reports 100 for the correct cell.
    ``n_share``/``p_share`` are the percentages of negative/positive samples.
    """

    tn: float
    fp: float
    fn: float
    tp: float
    accuracy: float
    precision: float
    recall: float
    f_score: float
    tn_rate: float
    fp_rate: float
    fn_rate: float
    tp_rate: float
    n_share: float
    p_share: float

    @classmethod
    def from_counts(cls, tn, fp, fn, tp):
        total = tn + fp + fn + tp
        if total <= 0:
            raise ContractViolation("metrics need at least one prediction")
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        # equals 2PR/(P+R) but with a single rounding
        f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        neg, pos = tn + fp, fn + tp
        tn_rate = 100.0 * tn / neg if neg else 100.0
        tp_rate = 100.0 * tp / pos if pos else 100.0
        return cls(
            tn, fp, fn, tp, (tp + tn) / total, precision, recall, f,
            tn_rate, 100.0 - tn_rate, 100.0 - tp_rate, tp_rate,
            100.0 * neg / total, 100.0 * pos / total,
        )

    def to_dict(self):
        return asdict(self)


def compute_metrics(predictions, labels) -> Metrics:
    pred = np.asarray(predictions).astype(np.int64).ravel()
    true = np.asarray(labels).astype(np.int64).ravel()
    if len(pred) != len(true):
        raise ContractViolation(f"{len(pred)} predictions but {len(true)} labels")
    if len(pred) == 0:
        raise ContractViolation("metrics need at least one prediction")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    return Metrics.from_counts(tn, fp, fn, tp)


def mean_metrics(items) -> Metrics:
    """Field-wise arithmetic mean over folds (not re-derived from pooled counts)."""
    items = list(items)
    if not items:
        raise ContractViolation("nothing to average")
    return Metrics(*(float(np.mean([getattr(m, f.name) for m in items])) for f in fields(Metrics)))


def pooled_metrics(items) -> Metrics:
    """Metrics of the summed confusion counts."""
    items = list(items)
    if not items:
        raise ContractViolation("nothing to pool")
    return Metrics.from_counts(*(sum(getattr(m, k) for m in items) for k in ("tn", "fp", "fn", "tp")))
