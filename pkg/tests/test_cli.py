import json
import subprocess
import sys
from pathlib import Path

import pytest

from robustfusion import harness, selftest
from robustfusion.cli import EXIT_EXPERIMENT, EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, main
from robustfusion.detector import TrainSchedule
from robustfusion.harness import DatasetConfig, save_config, toy_config


@pytest.fixture()
def tiny_cfg(tmp_path):
    cfg = toy_config(
        str(tmp_path / "sweep"),
        dataset=DatasetConfig(train_frames=6, eval_frames=3),
        schedule=TrainSchedule(epochs=1, lr_stages=((1, 1e-3),), pretrain_epochs=1, batch_size=3),
    )
    path = tmp_path / "tiny.json"
    save_config(path, cfg)
    return path


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["synth", "--no-such-flag"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    assert main(["--help"]) == EXIT_OK


def test_bad_config(tmp_path):
    (tmp_path / "c.json").write_text('{"schema_version": 1, "seeds": []}')
    assert main(["sweep", "--config", str(tmp_path / "c.json")]) == EXIT_USAGE
    assert main(["sweep", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_synth_is_deterministic(tmp_path, tiny_cfg):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "1", "--config", str(tiny_cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and any(k.startswith("train/") for k in a) and any(k.startswith("eval/") for k in a)
    assert main(["synth", "--seed", "2", "--config", str(tiny_cfg), "--out", str(tmp_path / "c")]) == EXIT_OK
    assert tree_bytes(tmp_path / "c") != a


def test_corrupt_train_eval(tmp_path, tiny_cfg, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--config", str(tiny_cfg), "--out", str(data)]) == EXIT_OK
    assert main(["corrupt", "--data", str(data), "--layers", "4", "--out", str(tmp_path / "c4")]) == EXIT_OK
    meta = json.loads((tmp_path / "c4" / "eval" / "dataset.json").read_text())
    assert meta["corruption"]["layer_target"] == 4
    assert main(["corrupt", "--data", str(data), "--layers", "4", "--keep-ratio", "0.5"]) == EXIT_USAGE

    model = tmp_path / "model"
    assert main(["train", "--config", str(tiny_cfg), "--variant", "conv_se", "--data", str(data), "--out", str(model)]) == EXIT_OK
    assert (model / "model.ckpt").exists() and (model / "history.tsv").exists()
    capsys.readouterr()
    out = tmp_path / "eval.json"
    assert main(["eval", "--model", str(model), "--data", str(data), "--translation", "1.0", "--out", str(out)]) == EXIT_OK
    rec = json.loads(out.read_text())
    assert rec["variant"] == "conv_se" and rec["severity"] == "100cm" and 0 <= rec["map"] <= 1
    assert main(["eval", "--model", str(model), "--data", str(tmp_path / "nowhere")]) == EXIT_USAGE


def test_sweep_and_report(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert main(["sweep", "--config", str(tiny_cfg), "--out", str(out)]) == EXIT_OK
    assert len((out / "results.csv").read_text().splitlines()) == 1 + 2 * 4
    assert (out / "report" / "table_misalignment.txt").exists()
    assert main(["report", "--results", str(out), "--out", str(tmp_path / "rep")]) == EXIT_OK
    assert (tmp_path / "rep" / "table_misalignment.txt").read_bytes() == (out / "report" / "table_misalignment.txt").read_bytes()
    assert main(["report", "--results", str(tmp_path / "empty")]) == EXIT_USAGE


def test_sweep_failure_exit_code(tmp_path, tiny_cfg, monkeypatch):
    def broken(*a, **kw):
        raise RuntimeError("diverged")

    monkeypatch.setattr(harness, "train", broken)
    assert main(["sweep", "--config", str(tiny_cfg), "--out", str(tmp_path / "run")]) == EXIT_EXPERIMENT


def test_selftest_failure_exit_code(monkeypatch):
    monkeypatch.setattr(selftest, "run_selftest", lambda **kw: [selftest.Check("oracle", "forced", False)])
    assert main(["selftest"]) == EXIT_SELFTEST


def test_selftest_quick_passes():
    assert main(["selftest", "--quick"]) == EXIT_OK


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "robustfusion", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("synth", "corrupt", "train", "eval", "sweep", "report", "selftest"):
        assert cmd in res.stdout
