import numpy as np
import pytest

from dhif.config import Config, ConfigError, load, parse, render
from dhif.storage import load_checkpoint, read_pgm, save_checkpoint, write_pgm


def test_pgm_16bit_roundtrip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 65536, size=(5, 7))
    write_pgm(tmp_path / "a.pgm", arr)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n65535\n") and len(raw) == len(b"P5\n7 5\n65535\n") + 70
    back, maxval = read_pgm(tmp_path / "a.pgm")
    assert maxval == 65535 and np.array_equal(back, arr)


def test_pgm_8bit_and_comments(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P5\n# made by hand\n3 2\n255\n" + bytes([0, 1, 2, 253, 254, 255]))
    back, maxval = read_pgm(tmp_path / "b.pgm")
    assert maxval == 255 and back.tolist() == [[0, 1, 2], [253, 254, 255]]


def test_pgm_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "c.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "d.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "e.pgm", np.array([[70000]]))


def test_checkpoint_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a.weights": rng.normal(size=(2, 3, 9)), "b": np.array([1e-300, -0.0, 3.5]),
               "scalar_vec": rng.normal(size=1)}
    save_checkpoint(tmp_path / "ck.txt", tensors, {"levels": 3, "nonlinearity": "tanh"})
    back, meta = load_checkpoint(tmp_path / "ck.txt")
    assert meta == {"levels": "3", "nonlinearity": "tanh"}
    for k, v in tensors.items():
        assert np.array_equal(back[k], v) and back[k].shape == v.shape


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.txt").write_text("hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.txt")


def test_config_roundtrip_fixed_point():
    text = render(Config())
    cfg = parse(text)
    assert cfg == Config() and render(cfg) == text
    custom = parse("train.dhif_levels = none\ntrain.channels = 4,8\ntrain.levels = 2\nscene.sigma_range = 1.0,1.5\n")
    assert parse(render(custom)) == custom
    assert custom.train.dhif_levels == frozenset() and custom.train.channels == (4, 8)


def test_config_rejects_unknown_and_malformed():
    for text, needle in [("train.bogus = 1", "train.bogus"), ("nosuch.key = 1", "nosuch"),
                         ("train.epochs = many", "train.epochs"), ("epochs = 3", "section.key"),
                         ("scene.seed = 3", "scene.seed")]:
        with pytest.raises(ConfigError) as exc:
            parse(text)
        assert needle in str(exc.value)


def test_config_comments_and_train_view(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# desk run\ntrain.epochs = 3   # short\nmetrics.threshold = 0.4\n")
    cfg = load(path)
    tc = cfg.train_config()
    assert tc.epochs == 3 and tc.threshold == 0.4


def test_config_validation_errors(tmp_path):
    for text in ("bench.batch = 0", "train.learning_rate = -1", "metrics.threshold = 2", "data.n_train = 0",
                 "train.dhif_levels = 5"):
        path = tmp_path / "c.txt"
        path.write_text(text + "\n")
        with pytest.raises(ConfigError):
            load(path)
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.txt")
