"""End-to-end leave-coils-out evaluation of the base learners and the stack.

Per fold: standardize features on base-train rows, balance the base-train
NCMs with permuted copies, train the FCN and the CNN(s), score the tune coils
to build meta-features, fit the meta forest on half of them, then evaluate
every stage on the untouched test coils.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import models
from .data import BROKEN, MEASURED, Dataset, SyntheticSpec, generate_synthetic, load_dataset
from .ensemble import (
    assemble_meta_rows,
    channel_normal_probs,
    coil_channel_stats,
    coil_cnn_probs,
    group_kfold,
    stacked_fit,
)
from .errors import ContractViolation, DimensionError, TrainingDegeneracyError, ValidationError
from .forest import ForestParams
from .metrics import METRIC_NAMES, Metrics, compute_metrics, mean_metrics, pooled_metrics
from .preprocessing import balance_to_ratio, fit_matrix_normalizer, fit_normalizer

log = logging.getLogger(__name__)

REPORT_VERSION = 1
FCN_DEFAULTS = models.TrainConfig(optimizer="adam", lr=1e-3, batch_size=64, max_epochs=50, patience=10)
CNN_DEFAULTS = models.TrainConfig(optimizer="adam", lr=1e-3, batch_size=32, max_epochs=30, patience=8)


@dataclass
class RunConfig:
    """Everything a run depends on; echoed verbatim into the report."""

    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    channel_path: str | None = None
    ncm_path: str | None = None
    k: int = 10
    seed: int = 0
    fcn_hidden: tuple = (64, 64, 32, 16)
    fcn_dropout: float = 0.2
    fcn_train: models.TrainConfig = field(default_factory=lambda: replace(FCN_DEFAULTS))
    cnn_variants: tuple = ("cnn2",)
    stack_cnn: str = "cnn2"
    cnn_dropout: float = 0.3
    cnn_train: models.TrainConfig = field(default_factory=lambda: replace(CNN_DEFAULTS))
    augment: bool = True
    target_ratio: float = 0.2
    full_expansion: bool = False
    unaugmented_baseline: bool = False
    forest: ForestParams = field(default_factory=ForestParams)
    meta_tree: bool = True
    jobs: int = 1

    def __post_init__(self):
        self.fcn_hidden = tuple(self.fcn_hidden)
        self.cnn_variants = tuple(self.cnn_variants)
        for v in self.cnn_variants:
            if v not in models.CNN_VARIANTS:
                raise ContractViolation(f"unknown CNN variant {v!r}")
        if self.stack_cnn not in self.cnn_variants:
            raise ContractViolation(f"stack_cnn {self.stack_cnn!r} must be one of the trained variants {self.cnn_variants}")
        if not 0 < self.target_ratio < 1:
            raise ContractViolation("target_ratio must lie in (0, 1)")
        if self.synthetic is None and not (self.channel_path and self.ncm_path):
            raise ContractViolation("need either a synthetic spec or both channel_path and ncm_path")

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, SyntheticSpec):
                v = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        d.pop("jobs")  # scheduling only; must not change the fingerprint
        return d

    @classmethod
    def from_dict(cls, d):
        """Inverse of :meth:`to_dict`; unknown keys raise ``KeyError`` naming the key."""
        d = dict(d)
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise KeyError(key)
        if d.get("synthetic") is not None and isinstance(d["synthetic"], dict):
            d["synthetic"] = synthetic_from_dict(d["synthetic"])
        for key in ("fcn_train", "cnn_train"):
            if isinstance(d.get(key), dict):
                base = FCN_DEFAULTS if key == "fcn_train" else CNN_DEFAULTS
                _check_keys(d[key], models.TrainConfig, key)
                d[key] = replace(base, **d[key])
        if isinstance(d.get("forest"), dict):
            _check_keys(d["forest"], ForestParams, "forest")
            d["forest"] = ForestParams(**d["forest"])
        return cls(**d)

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def benchmark_config(seed=0, **overrides):
    """The default synthetic benchmark with an augmented/unaugmented CNN1 pair.

    CNN1 stands in for CNN2 to keep five seeds of ten folds within minutes on
    one core; base-learner training is shortened to match.
    """
    kw = dict(
        synthetic=SyntheticSpec(seed=seed),
        seed=seed,
        fcn_train=replace(FCN_DEFAULTS, batch_size=128, max_epochs=30, patience=5),
        cnn_variants=("cnn1",),
        stack_cnn="cnn1",
        cnn_train=replace(CNN_DEFAULTS, max_epochs=20, patience=5),
        unaugmented_baseline=True,
    )
    kw.update(overrides)
    return RunConfig(**kw)


def _check_keys(d, cls, prefix):
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise KeyError(f"{prefix}.{key}")


def synthetic_from_dict(d):
    from .data import FEATURE_NAMES, FeatureModel

    d = dict(d)
    _check_keys(d, SyntheticSpec, "synthetic")
    if isinstance(d.get("features"), dict):
        d["features"] = tuple(FeatureModel(**d["features"][name]) for name in FEATURE_NAMES)
    if "severity_range" in d:
        d["severity_range"] = tuple(d["severity_range"])
    return SyntheticSpec(**d)


# ---------------------------------------------------------------------- folds


def fold_seeds(seed, k):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def _cnn_xy(ds: Dataset):
    return ds.matrices[:, None], ds.ncm_label


def _coil_predictions(probs_by_coil, labels):
    ids = sorted(probs_by_coil)
    pred = [int(probs_by_coil[c] >= 0.5) for c in ids]
    return pred, [labels[c] for c in ids]


def stage_names(cfg: RunConfig):
    names = ["FCN", "FCN-aggregated"]
    for v in cfg.cnn_variants:
        names.append(v.upper())
        if cfg.unaugmented_baseline:
            names.append(f"{v.upper()}-noaug")
    names.append("stacked")
    if cfg.meta_tree:
        names.append("stacked-tree")
    return names


def run_fold(dataset: Dataset, fold, cfg: RunConfig, fold_seed):
    """Train and score every stage on one fold; returns a plain dict."""
    rng = np.random.default_rng(fold_seed)
    seeds = rng.integers(0, 2**31, size=8)
    labels = dataset.coil_labels()
    base = dataset.subset(fold.base_train)
    tune = dataset.subset(fold.tune)
    test = dataset.subset(fold.test)

    if set(fold.test) & set(fold.fit):
        raise ContractViolation(f"fold {fold.index}: fit and test coils overlap")
    if (test.ncm_provenance != MEASURED).any():
        raise ContractViolation(f"fold {fold.index}: augmented NCM in the test set")

    # 1-D level
    fcn_norm = fit_normalizer(base.features)
    fcn = models.train(
        models.build_fcn(cfg.fcn_hidden, cfg.fcn_dropout),
        (base.features, base.channel_label),
        (tune.features, tune.channel_label),
        replace(cfg.fcn_train, seed=int(seeds[0])),
        normalizer=fcn_norm,
        fold=fold.index,
    )

    # matrix level
    measured_base = base.ncm_provenance == MEASURED
    ncm_norm = fit_matrix_normalizer(base.matrices[measured_base])
    train_ncms = list(base.ncm_samples())
    n_aug = 0
    if cfg.augment:
        balanced = balance_to_ratio(
            train_ncms, cfg.target_ratio, np.random.default_rng(int(seeds[1])), full_expansion=cfg.full_expansion
        )
        n_aug = len(balanced) - len(train_ncms)
        aug_base = base.with_ncms(balanced)
    else:
        aug_base = base
    if set(aug_base.ncm_coil.tolist()) - set(fold.base_train):
        raise ContractViolation(f"fold {fold.index}: augmented samples from outside base-train")

    cnns = {}
    for j, variant in enumerate(cfg.cnn_variants):
        spec = models.build_cnn(variant, cfg.cnn_dropout)
        tcfg = replace(cfg.cnn_train, seed=int(seeds[2] + j))
        cnns[variant.upper()] = models.train(
            spec, _cnn_xy(aug_base), _cnn_xy(tune), tcfg, normalizer=ncm_norm, fold=fold.index
        )
        if cfg.unaugmented_baseline:
            cnns[f"{variant.upper()}-noaug"] = models.train(
                spec, _cnn_xy(base), _cnn_xy(tune), tcfg, normalizer=ncm_norm, fold=fold.index
            )

    # scoring
    results = {}
    test_normal = channel_normal_probs(fcn, test)
    results["FCN"] = compute_metrics((test_normal <= 0.5).astype(int), test.channel_label)
    test_stats = coil_channel_stats(test_normal, test)
    results["FCN-aggregated"] = compute_metrics(*_coil_predictions(
        {c: 1.0 - s[0] for c, s in test_stats.items()}, labels))
    test_cnn = {}
    for name, model in cnns.items():
        test_cnn[name] = coil_cnn_probs(model, test)
        results[name] = compute_metrics(*_coil_predictions(test_cnn[name], labels))

    stack_name = cfg.stack_cnn.upper()
    tune_rows = assemble_meta_rows(
        coil_channel_stats(channel_normal_probs(fcn, tune), tune),
        coil_cnn_probs(cnns[stack_name], tune),
        {c: labels[c] for c in fold.tune},
    )
    test_rows = assemble_meta_rows(test_stats, test_cnn[stack_name], {c: labels[c] for c in fold.test})
    y_test = [r.label for r in test_rows]
    meta_seed = int(seeds[3])
    stacked = stacked_fit(tune_rows, replace(cfg.forest, seed=meta_seed), split_seed=meta_seed)
    results["stacked"] = compute_metrics(stacked.predict(test_rows), y_test)
    details = {
        "test_coils": len(fold.test),
        "base_train_coils": len(fold.base_train),
        "tune_coils": len(fold.tune),
        "test_broken_coils": int(sum(labels[c] == BROKEN for c in fold.test)),
        "augmented_ncms": n_aug,
        "fcn_best_epoch": fcn.best_epoch,
        "cnn_best_epochs": {name: m.best_epoch for name, m in cnns.items()},
        "fcn_normalizer": {"mean": fcn_norm.mean.tolist(), "std": fcn_norm.std.tolist()},
        "ncm_normalizer": {"mean": ncm_norm.mean.tolist(), "std": ncm_norm.std.tolist()},
        "meta_holdout": {"stacked": stacked.holdout_metrics.to_dict()},
    }
    if cfg.meta_tree:
        tree_params = replace(cfg.forest, n_trees=1, bootstrap=False, max_features=len(tune_rows[0].features()), seed=meta_seed)
        tree = stacked_fit(tune_rows, tree_params, split_seed=meta_seed)
        results["stacked-tree"] = compute_metrics(tree.predict(test_rows), y_test)
        details["meta_holdout"]["stacked-tree"] = tree.holdout_metrics.to_dict()
    return {"metrics": results, "details": details}


_FOLD_ERRORS = (ContractViolation, DimensionError, TrainingDegeneracyError, ValidationError, ValueError)


def _run_fold_safe(args):
    dataset, fold, cfg, fseed = args
    try:
        return run_fold(dataset, fold, cfg, fseed)
    except _FOLD_ERRORS as exc:
        log.error("fold %d failed: %s", fold.index, exc)
        return {"error": f"{type(exc).__name__}: {exc}"}


# --------------------------------------------------------------------- report


@dataclass
class EvalReport:
    stages: list
    per_fold: list  # per fold: {stage: Metrics} or None when the fold failed
    failures: dict
    details: list
    config: dict
    fingerprint: str
    synthetic: bool
    augmented: bool

    @property
    def averaged(self):
        return {s: mean_metrics(f[s] for f in self.per_fold if f is not None) for s in self.stages if self._ok()}

    @property
    def pooled(self):
        return {s: pooled_metrics(f[s] for f in self.per_fold if f is not None) for s in self.stages if self._ok()}

    def _ok(self):
        return any(f is not None for f in self.per_fold)

    def to_dict(self):
        return {
            "format": "coilstack-report",
            "version": REPORT_VERSION,
            "stages": self.stages,
            "synthetic": self.synthetic,
            "augmented": self.augmented,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "failures": {str(k): v for k, v in self.failures.items()},
            "per_fold": [None if f is None else {s: m.to_dict() for s, m in f.items()} for f in self.per_fold],
            "averaged": {s: m.to_dict() for s, m in self.averaged.items()},
            "pooled": {s: m.to_dict() for s, m in self.pooled.items()},
            "details": self.details,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "coilstack-report":
            raise ValueError("not a coilstack report")
        per_fold = [None if f is None else {s: Metrics(**m) for s, m in f.items()} for f in d["per_fold"]]
        return cls(
            d["stages"], per_fold, {int(k): v for k, v in d["failures"].items()}, d["details"],
            d["config"], d["fingerprint"], d["synthetic"], d["augmented"],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def run_pipeline(cfg: RunConfig, dataset: Dataset | None = None) -> EvalReport:
    if dataset is None:
        if cfg.synthetic is not None and not cfg.channel_path:
            dataset = generate_synthetic(cfg.synthetic)
        else:
            dataset = load_dataset(cfg.channel_path, cfg.ncm_path)
    plan = group_kfold(dataset.coil_labels(), cfg.k, cfg.seed)
    jobs = [(dataset, fold, cfg, s) for fold, s in zip(plan.folds, fold_seeds(cfg.seed, cfg.k))]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            outcomes = list(pool.map(_run_fold_safe, jobs))
    else:
        outcomes = [_run_fold_safe(j) for j in jobs]
    per_fold, details, failures = [], [], {}
    for fold, out in zip(plan.folds, outcomes):
        if "error" in out:
            per_fold.append(None)
            details.append(None)
            failures[fold.index] = out["error"]
        else:
            per_fold.append(out["metrics"])
            details.append(out["details"])
        log.info("fold %d done", fold.index)
    return EvalReport(
        stage_names(cfg), per_fold, failures, details, cfg.to_dict(), cfg.fingerprint(),
        bool(dataset.meta.get("synthetic", False)), cfg.augment,
    )


# -------------------------------------------------------------------- writers


def _pct(v):
    return f"{100 * v:6.2f}"


def format_tables(report: EvalReport):
    """Plain-text tables: averaged scores with row-normalized confusion rates, then per fold."""
    out = io.StringIO()
    tag = "synthetic data" if report.synthetic else "loaded data"
    out.write(f"# coilstack evaluation ({tag}; augmentation {'on' if report.augmented else 'off'})\n")
    out.write(f"# config {report.fingerprint}\n")
    if report.failures:
        for k, msg in sorted(report.failures.items()):
            out.write(f"# fold {k} FAILED: {msg}\n")
    out.write("\nAveraged over folds (%)\n")
    head = f"{'stage':<16}{'Accuracy':>10}{'Precision':>10}{'Recall':>10}{'F-Score':>10}" \
           f"{'TN':>8}{'FP':>8}{'FN':>8}{'TP':>8}{'N':>8}{'P':>8}\n"
    out.write(head)
    for s, m in report.averaged.items():
        out.write(
            f"{s:<16}" + "".join(f"{_pct(getattr(m, k)):>10}" for k in METRIC_NAMES)
            + "".join(f"{getattr(m, k):8.2f}" for k in ("tn_rate", "fp_rate", "fn_rate", "tp_rate", "n_share", "p_share"))
            + "\n"
        )
    out.write("\nPooled confusion counts (%)\n")
    out.write(f"{'stage':<16}{'Accuracy':>10}{'Precision':>10}{'Recall':>10}{'F-Score':>10}{'TN':>8}{'FP':>8}{'FN':>8}{'TP':>8}\n")
    for s, m in report.pooled.items():
        out.write(
            f"{s:<16}" + "".join(f"{_pct(getattr(m, k)):>10}" for k in METRIC_NAMES)
            + "".join(f"{int(getattr(m, k)):8d}" for k in ("tn", "fp", "fn", "tp")) + "\n"
        )
    out.write("\nF-score per fold (%)\n")
    out.write(f"{'stage':<16}" + "".join(f"{i:>8}" for i in range(len(report.per_fold))) + "\n")
    for s in report.stages:
        cells = ["  failed" if f is None else f"{_pct(f[s].f_score):>8}" for f in report.per_fold]
        out.write(f"{s:<16}" + "".join(cells) + "\n")
    return out.getvalue()


def format_scores_csv(report: EvalReport):
    """Averaged and pooled scores per stage, one row each (bar-chart input)."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["stage", "averaging", *METRIC_NAMES])
    for kind, table in (("fold_mean", report.averaged), ("pooled", report.pooled)):
        for s, m in table.items():
            w.writerow([s, kind, *(repr(float(getattr(m, k))) for k in METRIC_NAMES)])
    return out.getvalue()


def write_report(report: EvalReport, out_dir):
    """Write report.json, report.txt and scores.csv into ``out_dir``; returns the paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "text": out / "report.txt", "csv": out / "scores.csv"}
    paths["json"].write_text(report.to_json(), encoding="utf-8")
    paths["text"].write_text(format_tables(report), encoding="utf-8")
    paths["csv"].write_text(format_scores_csv(report), encoding="utf-8")
    return paths
