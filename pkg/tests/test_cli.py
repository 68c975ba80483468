import os

import numpy as np
import pytest

from glacier.cli import main


CONFIG = """
[model]
arch = toy_cnn
conv_channels = 4,8
hidden = 32
input_shape = 1,8,8

[dataset]
kind = blobs
classes = 4
per_class = 50
dim = 64
val_per_class = 25

[train]
epochs = 2
batch_size = 16
base_lr = 0.1
lr_decay_factor = 0.1
lr_milestones =
seed = 3
out_dir = {out}

[controller]
w = 4
"""


@pytest.fixture
def run_dir(tmp_path, capsys):
    out = tmp_path / "run"
    config = tmp_path / "run.ini"
    config.write_text(CONFIG.format(out=out))
    code = main(["train", "--config", str(config)])
    capsys.readouterr()
    assert code == 0
    return out, config


def test_train_exit_codes(tmp_path, capsys):
    config = tmp_path / "bad.ini"
    config.write_text("[train]\nepochs = not_a_number\n")
    assert main(["train", "--config", str(config)]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 1
    capsys.readouterr()


def test_train_writes_outputs(run_dir):
    out, _ = run_dir
    for name in ("metrics.csv", "epochs.csv", "decisions.log", "checkpoint.bin",
                 "run_summary.json"):
        assert (out / name).exists(), name


def test_eval_command(run_dir, capsys):
    out, config = run_dir
    code = main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--data", str(config)])
    captured = capsys.readouterr()
    assert code == 0
    assert "accuracy" in captured.out


def test_eval_corrupt_checkpoint_is_runtime_error(run_dir, capsys):
    out, config = run_dir
    bad = out / "bad.bin"
    bad.write_bytes(open(out / "checkpoint.bin", "rb").read()[:-4])
    code = main(["eval", "--checkpoint", str(bad), "--data", str(config)])
    capsys.readouterr()
    assert code == 2


def test_quantize_command(run_dir, tmp_path, capsys):
    out, _ = run_dir
    target = tmp_path / "ref.npz"
    code = main(["quantize", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(target)])
    capsys.readouterr()
    assert code == 0
    arrays = np.load(target)
    q_names = [k for k in arrays.files if k.endswith(".q")]
    assert q_names
    for name in q_names:
        assert arrays[name].dtype == np.int8


def test_report_command(run_dir, capsys):
    out, _ = run_dir
    code = main(["report", "--metrics", str(out / "metrics.csv")])
    captured = capsys.readouterr()
    assert code == 0
    assert "bwd FLOPs" in captured.out
    assert (out / "frozen_fraction_by_epoch.csv").exists()


def test_report_with_baseline_savings(run_dir, tmp_path, capsys):
    out, config = run_dir
    base_out = tmp_path / "base"
    assert main(["train", "--config", str(config), "--no-freeze", "--out", str(base_out)]) == 0
    code = main([
        "report", "--metrics", str(out / "metrics.csv"),
        "--baseline", str(base_out / "metrics.csv"),
    ])
    captured = capsys.readouterr()
    assert code == 0
    assert "saved" in captured.out


def test_inspect_cache_command(run_dir, capsys):
    out, _ = run_dir
    code = main(["inspect-cache", "--dir", str(out / "cache")])
    captured = capsys.readouterr()
    assert code == 0
    assert "total:" in captured.out


def test_no_cache_flag(tmp_path, capsys):
    out = tmp_path / "nc"
    config = tmp_path / "run.ini"
    config.write_text(CONFIG.format(out=out))
    assert main(["train", "--config", str(config), "--no-cache"]) == 0
    capsys.readouterr()
    assert not (out / "cache").exists() or not os.listdir(out / "cache")
