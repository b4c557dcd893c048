"""
Leave-coils-out evaluation end to end
=====================================

A small synthetic fleet, three folds and short training, so the whole run
finishes in well under a minute. The benchmark configuration lives in
coilstack.pipeline.benchmark_config.
"""

from coilstack.data import SyntheticSpec, generate_synthetic
from coilstack.ensemble import group_kfold
from coilstack.forest import ForestParams
from coilstack.models import TrainConfig
from coilstack.pipeline import RunConfig, format_tables, run_pipeline

spec = SyntheticSpec(coils=300, broken_fraction=0.1, seed=4)
ds = generate_synthetic(spec)
plan = group_kfold(ds.coil_labels(), k=3, seed=4)
for f in plan.folds:
    print(f"fold {f.index}: test {len(f.test)} coils, base-train {len(f.base_train)}, tune {len(f.tune)}")

cfg = RunConfig(
    synthetic=spec,
    k=3,
    seed=4,
    fcn_hidden=(16, 16, 8, 8),
    fcn_train=TrainConfig(batch_size=64, max_epochs=20, patience=5),
    cnn_variants=("cnn1",),
    stack_cnn="cnn1",
    cnn_train=TrainConfig(batch_size=16, max_epochs=20, patience=5),
    unaugmented_baseline=True,
    forest=ForestParams(n_trees=25),
)
report = run_pipeline(cfg, ds)
print()
print(format_tables(report))
