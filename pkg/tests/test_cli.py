import csv

import numpy as np
import pytest

import dhif.net
from dhif.cli import main
from dhif.gradcheck import kernel_sizes, run_suites

TINY = """data.n_train = 4
data.n_test = 3
scene.height = 16
scene.width = 16
scene.targets_max = 1
scene.blobs = 1
train.levels = 2
train.channels = 4,4
train.dhif_levels = 2
train.batch_size = 2
train.epochs = {epochs}
"""


@pytest.fixture
def cfg(tmp_path):
    def make(epochs=0, extra=""):
        path = tmp_path / f"cfg{epochs}.txt"
        path.write_text(TINY.format(epochs=epochs) + extra)
        return str(path)
    return make


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_missing_config(tmp_path, capsys):
    assert main(["gen-data", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "d")]) == 2
    assert "nope.txt" in capsys.readouterr().err


def test_gen_data_bad_key(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("scene.wobble = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "scene.wobble" in capsys.readouterr().err


def test_gen_data_deterministic(tmp_path, cfg):
    assert main(["gen-data", "--config", cfg(), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", cfg(), "--out", str(tmp_path / "b")]) == 0
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    assert fa == fb
    manifest = (tmp_path / "a/train/manifest.txt").read_text()
    assert manifest.count("\nscene ") == 4


def test_gen_data_io_error(tmp_path, cfg):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["gen-data", "--config", cfg(), "--out", str(blocker / "x")]) == 3


def test_train_then_eval_agree(tmp_path, cfg):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--config", cfg(), "--out", str(data)]) == 0
    assert main(["train", "--config", cfg(), "--out", str(run), "--data", str(data)]) == 0
    assert (run / "report.csv").read_text().count("\n") == 3  # header, epoch 0, summary
    assert main(["eval", "--checkpoint", str(run / "checkpoint.txt"), "--data", str(data),
                 "--config", cfg(), "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_text() == (run / "metrics.csv").read_text()


def test_train_in_memory_matches_disk_data(tmp_path, cfg):
    data = tmp_path / "data"
    main(["gen-data", "--config", cfg(1), "--out", str(data)])
    main(["train", "--config", cfg(1), "--out", str(tmp_path / "r1"), "--data", str(data)])
    main(["train", "--config", cfg(1), "--out", str(tmp_path / "r2")])
    assert (tmp_path / "r1/report.csv").read_bytes() == (tmp_path / "r2/report.csv").read_bytes()
    assert (tmp_path / "r1/bank_enc2.conv1.txt").exists()


def test_eval_predictions_equal_truth(tmp_path, cfg):
    data = tmp_path / "data"
    main(["gen-data", "--config", cfg(), "--out", str(data)])
    out = tmp_path / "m.csv"
    assert main(["eval", "--preds", str(data / "test/masks"), "--data", str(data), "--out", str(out)]) == 0
    row = list(csv.DictReader(open(out)))[0]
    assert float(row["iou"]) == 1.0 and float(row["pd"]) == 1.0 and float(row["fa"]) == 0.0


def test_eval_missing_checkpoint(tmp_path, cfg):
    data = tmp_path / "data"
    main(["gen-data", "--config", cfg(), "--out", str(data)])
    assert main(["eval", "--checkpoint", str(tmp_path / "none.txt"), "--data", str(data)]) == 3


def test_train_divergence_exit_code(tmp_path, cfg):
    with np.errstate(all="ignore"):
        code = main(["train", "--config", cfg(2, "train.learning_rate = 1e300\n"), "--out", str(tmp_path / "r")])
    assert code == 4


def test_gradcheck_passes_and_fault_injection_fails(monkeypatch, capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    assert "all groups pass" in capsys.readouterr().out
    relu_bwd = dhif.net.relu_backward
    monkeypatch.setattr(dhif.net, "relu_backward", lambda g, t: -relu_bwd(g, t))
    assert main(["gradcheck", "--instances", "2"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_full_mode_kernel_sizes():
    assert kernel_sizes(True) == (1, 3, 5) and kernel_sizes(False) == (1, 3)
    assert all(g.passed for g in run_suites(instances=1, full=True))


def test_freq_analyze(tmp_path, cfg, capsys):
    run = tmp_path / "run"
    main(["train", "--config", cfg(1), "--out", str(run)])
    out = tmp_path / "f.csv"
    grid = tmp_path / "g.txt"
    assert main(["freq-analyze", "--bank", str(run / "bank_enc2.conv1.txt"), "--out", str(out),
                 "--grid-out", str(grid), "--n", "16"]) == 0
    assert out.read_text().startswith("quantity,min,median,max")
    assert np.loadtxt(grid).shape == (16, 16)
    bad = tmp_path / "bad.txt"
    bad.write_text("0 0 0 0 1\nnot a line\n")
    assert main(["freq-analyze", "--bank", str(bad), "--out", str(out)]) == 3
    assert "line 2" in capsys.readouterr().err
    assert main(["freq-analyze", "--bank", str(tmp_path / "missing.txt"), "--out", str(out)]) == 3


def test_bench(tmp_path, capsys):
    small = tmp_path / "b.txt"
    small.write_text("bench.batch = 2\nbench.height = 16\nbench.width = 16\nbench.channels = 4\nbench.repeats = 1\n")
    assert main(["bench", "--config", str(small), "--out", str(tmp_path / "b.csv")]) == 0
    vals = dict(csv.reader(open(tmp_path / "b.csv")))
    assert int(vals["dhif_extra_params"]) == 810 and int(vals["net_extra_params"]) == 1620
    assert int(vals["dhif_params"]) == 4 * 4 * 9 + 810 and int(vals["conv_params"]) == 4 * 4 * 9
    zero = tmp_path / "z.txt"
    zero.write_text("bench.batch = 0\n")
    assert main(["bench", "--config", str(zero)]) == 2


def test_thread_env(monkeypatch, tmp_path, cfg):
    monkeypatch.setenv("DHIF_THREADS", "1")
    assert main(["gen-data", "--config", cfg(), "--out", str(tmp_path / "d")]) == 0
    monkeypatch.setenv("DHIF_THREADS", "zero")
    assert main(["gen-data", "--config", cfg(), "--out", str(tmp_path / "d")]) == 2
