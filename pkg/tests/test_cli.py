import json

import pytest

from coilstack.cli import main
from coilstack.data import BROKEN, load_ncm_records
from small_runs import tiny_config


def run(*argv):
    return main([str(a) for a in argv])


def write_config(tmp_path, cfg):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_generate_is_deterministic(tmp_path, capsys):
    assert run("generate", "--out", tmp_path / "a", "--coils", 40, "--broken-fraction", 0.068, "--seed", 7) == 0
    assert run("generate", "--out", tmp_path / "b", "--coils", 40, "--broken-fraction", 0.068, "--seed", 7) == 0
    for name in ("channels.csv", "ncms.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "coils 40" in capsys.readouterr().out


def test_generate_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as err:
        run("generate", "--out", tmp_path, "--coils", 0)
    assert err.value.code == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"colis": 10}')
    with pytest.raises(SystemExit) as err:
        run("generate", "--out", tmp_path, "--config", bad)
    assert err.value.code == 2


def test_generate_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("generate", "--out", blocker / "sub", "--coils", 3) == 1


def test_augment_reaches_ratio(tmp_path, capsys):
    run("generate", "--out", tmp_path, "--coils", 200, "--seed", 1)
    out = tmp_path / "balanced.csv"
    assert run("augment", tmp_path / "ncms.csv", out, "--target-ratio", 0.2) == 0
    samples = load_ncm_records(out)  # revalidates every matrix
    broken = sum(s.label == BROKEN for s in samples)
    assert broken / len(samples) >= 0.2
    assert (broken - 1) / (len(samples) - 1) < 0.2  # one fewer copy would miss the target
    assert "after:" in capsys.readouterr().out


def test_augment_below_current_copies_unchanged(tmp_path):
    run("generate", "--out", tmp_path, "--coils", 30, "--broken-fraction", 0.5, "--seed", 1)
    out = tmp_path / "same.csv"
    assert run("augment", tmp_path / "ncms.csv", out, "--target-ratio", 0.1) == 0
    assert out.read_bytes() == (tmp_path / "ncms.csv").read_bytes()


def test_augment_without_broken_fails(tmp_path):
    run("generate", "--out", tmp_path, "--coils", 5, "--broken-fraction", 0, "--seed", 1)
    assert run("augment", tmp_path / "ncms.csv", tmp_path / "o.csv") == 1


def test_evaluate_writes_identical_reports(tmp_path):
    cfg = write_config(tmp_path, tiny_config(0))
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("evaluate", "--config", cfg, "--out", tmp_path / "b") == 0
    for name in ("report.json", "report.txt", "scores.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_evaluate_flags_override_config(tmp_path):
    cfg = write_config(tmp_path, tiny_config(0))
    assert run("evaluate", "--config", cfg, "--out", tmp_path, "--no-augment", "--seed", 3, "--k", 2,
               "--cnn-variant", "all", "--jobs", 1) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["augmented"] is False
    assert report["config"]["seed"] == 3 and report["config"]["synthetic"]["seed"] == 3
    assert len(report["per_fold"]) == 2
    assert {"CNN1", "CNN2", "CNN3", "CNN4"} <= set(report["stages"])


def test_evaluate_unknown_key_is_usage_error(tmp_path):
    doc = tiny_config(0).to_dict()
    doc["learning_rate"] = 1
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SystemExit) as err:
        run("evaluate", "--config", path, "--out", tmp_path)
    assert err.value.code == 2


def test_evaluate_failed_fold_exits_1(tmp_path):
    cfg = write_config(tmp_path, tiny_config(0))
    assert run("evaluate", "--config", cfg, "--out", tmp_path, "--coils", 30, "--broken-fraction", 0.05, "--seed", 3) == 1
    assert json.loads((tmp_path / "report.json").read_text())["failures"]


def test_evaluate_from_files_and_report(tmp_path, capsys):
    run("generate", "--out", tmp_path, "--coils", 60, "--broken-fraction", 0.35, "--seed", 2)
    cfg = write_config(tmp_path, tiny_config(0))
    assert run("evaluate", "--config", cfg, "--channels", tmp_path / "channels.csv", "--ncms", tmp_path / "ncms.csv",
               "--out", tmp_path / "r") == 0
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["synthetic"] is False and report["config"]["synthetic"] is None
    capsys.readouterr()
    assert run("report", tmp_path / "r" / "report.json", "--format", "csv") == 0
    assert capsys.readouterr().out == (tmp_path / "r" / "scores.csv").read_text()


def test_train_base_writes_checkpoints(tmp_path):
    run("generate", "--out", tmp_path, "--coils", 40, "--broken-fraction", 0.3, "--seed", 2)
    assert run("train-base", "--channels", tmp_path / "channels.csv", "--ncms", tmp_path / "ncms.csv",
               "--out", tmp_path / "m", "--cnn-variant", "cnn1", "--epochs", 1) == 0
    assert (tmp_path / "m" / "fcn.npz").exists() and (tmp_path / "m" / "cnn1.npz").exists()
