"""
Averaging F-scores over folds
=============================

Averaging precision, recall and F separately over folds does not keep
F = 2PR / (P + R). Summing the confusion counts first does.
"""

from coilstack.metrics import Metrics, mean_metrics, pooled_metrics

folds = [
    Metrics.from_counts(tn=95, fp=0, fn=4, tp=1),  # precise, misses most
    Metrics.from_counts(tn=95, fp=0, fn=0, tp=5),  # perfect
    Metrics.from_counts(tn=95, fp=0, fn=5, tp=0),  # predicts nothing broken
]
avg = mean_metrics(folds)
pooled = pooled_metrics(folds)
for name, m in (("fold mean", avg), ("pooled", pooled)):
    harmonic = 2 * m.precision * m.recall / (m.precision + m.recall)
    print(f"{name:9s} P={m.precision:.3f} R={m.recall:.3f} F={m.f_score:.3f}  2PR/(P+R)={harmonic:.3f}")
