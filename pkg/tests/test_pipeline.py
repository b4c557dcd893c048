import json

import numpy as np
import pytest

from coilstack import pipeline
from coilstack.data import SyntheticSpec
from coilstack.errors import ContractViolation
from coilstack.pipeline import EvalReport, RunConfig, run_pipeline, stage_names, write_report
from leak_checks import Spy, check_leak_free
from small_runs import tiny_config


def test_leak_freedom(monkeypatch):
    for seed in range(10):  # the acceptance suite runs 100
        spy = Spy(monkeypatch)
        cfg = tiny_config(seed)
        report = run_pipeline(cfg)
        check_leak_free(cfg, report, spy)


def test_report_structure():
    cfg = tiny_config(1, cnn_variants=("cnn1", "cnn4"), unaugmented_baseline=True, target_ratio=0.5)
    report = run_pipeline(cfg)
    assert report.stages == ["FCN", "FCN-aggregated", "CNN1", "CNN1-noaug", "CNN4", "CNN4-noaug", "stacked", "stacked-tree"]
    assert len(report.per_fold) == cfg.k
    for fold in report.per_fold:
        assert set(fold) == set(report.stages)
    for s in report.stages:
        mean_f = np.mean([f[s].f_score for f in report.per_fold])
        assert report.averaged[s].f_score == pytest.approx(mean_f, abs=1e-15)
    assert report.synthetic and report.augmented
    assert all(d["augmented_ncms"] > 0 for d in report.details)


def test_default_stage_names():
    assert stage_names(RunConfig()) == ["FCN", "FCN-aggregated", "CNN2", "stacked", "stacked-tree"]


def test_report_json_round_trip():
    report = run_pipeline(tiny_config(2))
    back = EvalReport.from_dict(json.loads(report.to_json()))
    assert back.to_json() == report.to_json()


def test_identical_runs_write_identical_files(tmp_path):
    a = write_report(run_pipeline(tiny_config(3)), tmp_path / "a")
    b = write_report(run_pipeline(tiny_config(3)), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_parallel_matches_serial():
    serial = run_pipeline(tiny_config(4))
    parallel = run_pipeline(tiny_config(4, jobs=2))
    assert serial.to_json() == parallel.to_json()


def test_no_augment_trains_on_measured_only():
    report = run_pipeline(tiny_config(5, augment=False))
    assert not report.augmented
    assert all(d["augmented_ncms"] == 0 for d in report.details)


def test_failed_fold_is_marked():
    # a single broken coil: whichever folds do not test it have it in training only
    cfg = tiny_config(6, synthetic=SyntheticSpec(coils=30, broken_fraction=0.05, seed=3))
    report = run_pipeline(cfg)
    assert len(report.failures) == cfg.k
    assert report.per_fold == [None] * cfg.k
    assert "FAILED" in pipeline.format_tables(report)


def test_config_fingerprint_ignores_jobs_only():
    assert tiny_config(0).fingerprint() == tiny_config(0, jobs=4).fingerprint()
    assert tiny_config(0).fingerprint() != tiny_config(1).fingerprint()


def test_config_dict_round_trip_and_unknown_keys():
    cfg = tiny_config(7)
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(KeyError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(KeyError, match="fcn_train.lrate"):
        RunConfig.from_dict({"fcn_train": {"lrate": 0.1}})


def test_config_contract():
    with pytest.raises(ContractViolation):
        RunConfig(cnn_variants=("cnn2",), stack_cnn="cnn1")
    with pytest.raises(ContractViolation):
        RunConfig(cnn_variants=("cnn9",), stack_cnn="cnn9")
