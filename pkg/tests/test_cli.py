import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from gcgrelu.checkpoint import load_checkpoint, save_checkpoint
from gcgrelu.cli import main
from gcgrelu.gcnet import build_smallnet
from test_data import write_fake_mnist


@pytest.fixture
def fake_mnist(tmp_path):
    d = tmp_path / "mnist"
    d.mkdir()
    write_fake_mnist(d, n_train=40, n_test=20)
    return str(d)


@pytest.fixture(autouse=True)
def no_env_data_dir(monkeypatch):
    monkeypatch.delenv("GRELU_DATA_DIR", raising=False)


def test_toy_synth_run(tmp_path, capsys):
    start = time.perf_counter()
    code = main(["train", "--model", "toy", "--dataset", "synth", "--epochs", "5",
                 "--out-dir", str(tmp_path), "--log-level", "WARNING"])
    elapsed = time.perf_counter() - start
    assert code == 0 and elapsed < 60
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 5 and float(rows[-1]["train_err"]) < 0.05
    out = capsys.readouterr().out
    assert "final test error" in out and "parameters" in out
    for name in ("summary.txt", "checkpoint.bin", "metrics.jsonl", "error_curves.png",
                 "grelu_trajectory.png"):
        assert (tmp_path / name).exists(), name


def test_deterministic_cli_runs_are_identical(tmp_path):
    for k in ("a", "b"):
        assert main(["train", "--model", "toy", "--epochs", "2", "--seed", "7", "--deterministic",
                     "--no-plot", "--out-dir", str(tmp_path / k), "--log-level", "WARNING"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_smallnet_train_summary(tmp_path, fake_mnist, capsys):
    code = main(["train", "--model", "smallnet-gc-grelu", "--data-dir", fake_mnist, "--epochs", "2",
                 "--batch-size", "16", "--no-plot", "--out-dir", str(tmp_path), "--log-level", "WARNING"])
    assert code == 0
    out = capsys.readouterr().out
    assert "parameters       7858" in out
    assert "block3.2.grelu" in out and "GReLU trajectory" in out
    assert len(list(csv.reader(open(tmp_path / "metrics.csv")))) == 3


def test_env_data_dir_fallback(tmp_path, fake_mnist, monkeypatch):
    monkeypatch.setenv("GRELU_DATA_DIR", fake_mnist)
    assert main(["train", "--epochs", "1", "--batch-size", "20", "--no-plot",
                 "--out-dir", str(tmp_path), "--log-level", "WARNING"]) == 0


def test_bias_free_classifier_flag_trains(tmp_path, fake_mnist):
    assert main(["train", "--strict-paper", "--data-dir", fake_mnist, "--epochs", "2",
                 "--batch-size", "20", "--no-plot", "--out-dir", str(tmp_path),
                 "--log-level", "WARNING"]) == 0
    net, _ = load_checkpoint(str(tmp_path / "checkpoint.bin"))
    assert "bias" not in net.classifier.params


def test_missing_data_exit_2(tmp_path, capsys):
    assert main(["train", "--out-dir", str(tmp_path)]) == 2
    assert "--data-dir" in capsys.readouterr().err
    assert main(["train", "--data-dir", str(tmp_path / "nowhere"), "--out-dir", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_corrupt_data_exit_2(tmp_path, fake_mnist, capsys):
    p = f"{fake_mnist}/train-images-idx3-ubyte"
    blob = bytearray(open(p, "rb").read())
    blob[2] = 7
    open(p, "wb").write(bytes(blob))
    assert main(["train", "--data-dir", fake_mnist, "--out-dir", str(tmp_path)]) == 2
    assert "magic" in capsys.readouterr().err


def test_nonfinite_exit_3(tmp_path, capsys):
    with np.errstate(all="ignore"):
        code = main(["train", "--model", "toy", "--lr", "1e200", "--freeze-epochs", "0",
                     "--weight-decay", "0", "--epochs", "3", "--no-plot",
                     "--out-dir", str(tmp_path), "--log-level", "WARNING"])
    assert code == 3
    assert "non-finite" in capsys.readouterr().err


def test_bad_flags_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["train", "--model", "resnet"])


def test_bad_config_exit_2(tmp_path):
    assert main(["train", "--model", "toy", "--batch-size", "1", "--out-dir", str(tmp_path)]) == 2


def test_inspect_fresh_smallnet(tmp_path, capsys):
    path = str(tmp_path / "c.bin")
    save_checkpoint(build_smallnet("grelu", "gc"), path)
    assert main(["inspect", path]) == 0
    out = capsys.readouterr().out
    assert out.count("n=2 (8 scalars)") == 3
    assert "endpoints -0.600000 -0.200000 +0.200000 +0.600000" in out
    assert "7858" in out


def test_inspect_tampered_exit_2(tmp_path, capsys):
    path = tmp_path / "c.bin"
    save_checkpoint(build_smallnet("grelu", "gc"), str(path))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    assert main(["inspect", str(path)]) == 2
    assert "magic" in capsys.readouterr().err


def test_inspect_after_train_is_ordered(tmp_path, capsys):
    main(["train", "--model", "toy", "--epochs", "3", "--freeze-epochs", "0", "--no-plot",
          "--out-dir", str(tmp_path), "--log-level", "WARNING"])
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "checkpoint.bin")]) == 0
    net, _ = load_checkpoint(str(tmp_path / "checkpoint.bin"))
    for layer in net.grelu_layers():
        assert np.all(np.diff(layer.sets[0].endpoints) > 0)
        assert not np.array_equal(layer.sets[0].slopes, [0.01, 0.2, 1.5, 3.0])


def test_eval(tmp_path, capsys):
    main(["train", "--model", "toy", "--epochs", "2", "--no-plot", "--out-dir", str(tmp_path),
          "--log-level", "WARNING"])
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "checkpoint.bin")]) == 0
    assert "test error" in capsys.readouterr().out


def test_compare(tmp_path, fake_mnist, capsys):
    code = main(["compare", "--data-dir", fake_mnist, "--epochs", "2", "--batch-size", "20",
                 "--out-dir", str(tmp_path), "--log-level", "WARNING"])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(r["gc_err"] != "" and r["conv_err"] != "" for r in rows)
    verdict = json.load(open(tmp_path / "compare.json"))
    assert verdict["gc_params"] == 7858 and verdict["conv_params"] == 8138
    assert verdict["param_gap"] < 0.10
    assert (tmp_path / "compare.png").exists()
    assert (tmp_path / "gc" / "metrics.csv").exists() and (tmp_path / "conv" / "metrics.csv").exists()


@pytest.mark.parametrize("target", ["network", "grelu", "conv", "batchnorm", "linear"])
def test_gradcheck_command(tmp_path, target, capsys):
    path = tmp_path / "g.csv"
    assert main(["gradcheck", "--target", target, "--csv", str(path)]) == 0
    assert "PASS" in capsys.readouterr().out
    assert path.read_text().startswith("tensor,coords")


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gcgrelu", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "eval", "gradcheck", "inspect", "compare"):
        assert cmd in res.stdout


def test_missing_matplotlib_skips_figures(tmp_path, monkeypatch, caplog):
    monkeypatch.setitem(sys.modules, "matplotlib", None)  # import raises ImportError
    code = main(["train", "--model", "toy", "--epochs", "1", "--out-dir", str(tmp_path)])
    assert code == 0 and (tmp_path / "metrics.csv").exists()
    assert not (tmp_path / "error_curves.png").exists()
    assert "matplotlib not installed" in caplog.text
