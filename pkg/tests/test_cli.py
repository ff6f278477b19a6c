import io
import os

import numpy as np
import pytest

from capsroute.cli import SCHEMAS, dump_config, resolve, run
from capsroute.data import write_idx


def call(*argv):
    out = io.StringIO()
    code = run(list(argv), out)
    return code, out.getvalue()


def read_tsv(path):
    lines = open(path).read().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


@pytest.fixture(scope="module")
def tiny_mnist(tmp_path_factory):
    root = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 40), ("t10k", 12)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        images = rng.integers(0, 60, (n, 28, 28)).astype(np.uint8)
        for i, k in enumerate(labels):  # a class-dependent bright bar
            images[i, 2 + 2 * k:4 + 2 * k, 4:24] = 255
        write_idx(root / f"{prefix}-images-idx3-ubyte", images)
        write_idx(root / f"{prefix}-labels-idx1-ubyte", labels)
    return str(root)


def test_toy_uniform_limit(tmp_path):
    code, out = call("toy", "--lambda1", "100", "--lambda2", "0", "--out-dir", str(tmp_path))
    assert code == 0
    (row,) = read_tsv(tmp_path / "toy_summary.tsv")
    assert float(row["max_dev_uniform"]) < 1e-3 and float(row["mu_dev_mean"]) < 1e-3
    votes = read_tsv(tmp_path / "toy_votes.tsv")
    assert len(votes) == 100
    c = np.array([float(v["c[100,0]"]) for v in votes])
    assert np.abs(c - 0.01).max() < 1e-3


def test_toy_default_grid_limits(tmp_path):
    code, _ = call("toy", "--out-dir", str(tmp_path))
    assert code == 0
    rows = read_tsv(tmp_path / "toy_summary.tsv")
    assert [(float(r["lambda1"]), float(r["lambda2"])) for r in rows] == [(100, 0), (0.01, 0), (1, 1), (1, 1000)]
    assert max(float(rows[1]["mass_cluster0"]), float(rows[1]["mass_cluster1"])) >= 0.99
    assert float(rows[3]["max_dev_activations"]) < 1e-3


def test_toy_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert call("toy", "--seed", "4", "--out-dir", str(tmp_path / d))[0] == 0
    for name in ("toy_votes.tsv", "toy_summary.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_shapes_reports_reference_table():
    code, out = call("shapes", "--dataset", "smallnorb")
    assert code == 0
    for shape in ("1x32x32x1", "1x16x16x64", "1x16x16x8x17", "1x7x7x16x17", "1x5x5x16x17", "1x1x1x5x17"):
        assert shape in out
    assert "parameters excluding routing:" in out


def test_gradcheck_similarity_passes():
    code, out = call("gradcheck", "--procedure", "similarity", "--precision", "64")
    assert code == 0, out
    assert "similarity: PASS" in out and "FAIL" not in out


def test_usage_errors_exit_2(tmp_path, capsys):
    assert call("train")[0] == 2
    assert call("train", "--data-dir", str(tmp_path / "nowhere"))[0] == 2
    assert call("eval", "--data-dir", str(tmp_path))[0] == 2
    assert call("frobnicate")[0] == 2
    assert call("toy", "--set", "lambda3=1")[0] == 2
    assert call("toy", "--set", "n=many")[0] == 2
    assert call("toy", "--lambda1", "1,2", "--lambda2", "1")[0] == 2
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[toys]\nn = 4\n")
    assert call("toy", "--config", str(cfg))[0] == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("command", sorted(SCHEMAS))
def test_resolved_config_round_trips(command, tmp_path):
    cfg = resolve(command, overrides=["seed=7"])
    path = tmp_path / "c.ini"
    path.write_text(dump_config(command, cfg))
    assert resolve(command, str(path)) == cfg


def test_precedence_config_then_set_then_flags(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[toy]\nn = 10\nseed = 3\nscale = 2.5\n[train]\nepochs = 9\n")
    code, out = call("toy", "--config", str(path), "--set", "seed=5", "--seed", "6", "--print-config")
    assert code == 0
    assert "n = 10" in out and "seed = 6" in out and "scale = 2.5" in out


def test_train_then_eval(tiny_mnist, tmp_path):
    run_dir = tmp_path / "run"
    code, out = call("train", "--data-dir", tiny_mnist, "--epochs", "1", "--batch-size", "12",
                     "--out-dir", str(run_dir), "--seed", "1")
    assert code == 0, out
    assert out.startswith("[train]")
    assert (run_dir / "config.ini").exists() and (run_dir / "metrics.tsv").exists()
    assert "test accuracy of best checkpoint" in out
    code, out = call("eval", "--checkpoint", str(run_dir / "checkpoint"), "--data-dir", tiny_mnist)
    assert code == 0, out
    assert "on 12 examples" in out
    counts = [sum(int(v) for v in line.split("\t")) for line in out.splitlines()[-10:]]
    assert counts == [2, 2] + [1] * 8
    assert call("eval", "--checkpoint", str(tmp_path), "--data-dir", tiny_mnist)[0] == 2
