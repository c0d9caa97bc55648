import json
import subprocess
import sys

import numpy as np
import pytest

from hidden_ambient.cli import main
from hidden_ambient.imaging import read_pgm

TINY_TRAIN = {"noise_dim": 6, "image_shape": [8, 8], "hidden_shape": [2, 4, 4], "g1_hidden": [12],
              "d_hidden": [10, 6], "mode": "ambient_hidden",
              "spec_hidden": {"kind": "block_pixel", "p": 0.5},
              "dataset_spec": {"kind": "block_pixel", "p": 0.5}, "dataset_size": 200,
              "batch_size": 8, "steps": 4, "eval_every": 2, "eval_samples": 100}


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestUsage:
    def test_no_command(self, capsys):
        assert run(capsys)[0] == 1

    def test_unknown_command(self, capsys):
        assert run(capsys, "frobnicate")[0] == 1

    def test_missing_required(self, capsys):
        assert run(capsys, "sample", "--n", "4")[0] == 1

    def test_bad_shape(self, capsys):
        assert run(capsys, "check-uniqueness", "--spec", '{"kind":"identity"}', "--shape", "4by4",
                   "--samples", "10")[0] == 1

    def test_bad_json(self, capsys):
        assert run(capsys, "oracle", "--channel", "[[1,0]", "--target", "[1]")[0] == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "hidden_ambient", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout


class TestRuntimeErrors:
    def test_missing_checkpoint(self, capsys, tmp_path):
        code, _, err = run(capsys, "sample", "--ckpt", str(tmp_path / "nope"), "--out", str(tmp_path / "x.pgm"))
        assert code == 2 and "error" in err

    def test_corrupt_checkpoint(self, capsys, tmp_path):
        (tmp_path / "bad.hagn").write_bytes(b"NOPE" + bytes(20))
        assert run(capsys, "sample", "--ckpt", str(tmp_path / "bad.hagn"), "--out", str(tmp_path / "x.pgm"))[0] == 2

    def test_non_stochastic_channel(self, capsys):
        assert run(capsys, "oracle", "--channel", "[[0.5,0.2],[0,1]]", "--target", "[0.5,0.5]")[0] == 2

    def test_invalid_config(self, capsys, tmp_path):
        bad = dict(TINY_TRAIN, mode="sideways")
        assert run(capsys, "train", "--config", json.dumps(bad), "--out", str(tmp_path))[0] == 2


def test_check_uniqueness_identity(capsys):
    code, out, _ = run(capsys, "check-uniqueness", "--spec", '{"kind":"identity"}', "--shape", "2x2",
                       "--samples", "50")
    rep = json.loads(out)
    assert code == 0 and rep["identity_probability_estimate"] == 1.0 and rep["channel_injective"] is True


def test_check_uniqueness_block_pixel(capsys):
    code, out, _ = run(capsys, "check-uniqueness", "--spec", '{"kind":"block_pixel","p":0.5}',
                       "--shape", "4x4", "--samples", "2000")
    rep = json.loads(out)
    # P(no pixel blocked) = 2^-16, so essentially zero identity draws
    assert code == 0 and rep["identity_probability_estimate"] < 0.01 and rep.get("channel_injective") is None


def test_oracle(capsys):
    code, out, _ = run(capsys, "oracle", "--channel", "[[1,0],[0.5,0.5]]", "--target", "[0.8,0.2]",
                       "--grid-step", "0.01")
    rep = json.loads(out)
    assert code == 0
    np.testing.assert_allclose(rep["minimizers"], [[0.6, 0.4]], atol=1e-12)
    assert rep["min_js"] < 1e-12


def test_mixture(capsys):
    code, out, _ = run(capsys, "mixture", "--p2", "0.5", "--channel-noise", "[[1,0],[0.5,0.5]]",
                       "--p-x", "[0.6,0.4]", "--grid-step", "0.01")
    rep = json.loads(out)
    assert code == 0 and rep["agreement"] is False
    np.testing.assert_allclose(rep["target"], [0.7, 0.3])


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--coords", "4", "--batch", "2")
    assert code == 0 and float(out.split()[-1]) < 1e-5


def test_train_then_sample(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--config", str(cfg), "--out", str(out))
    assert code == 0
    assert json.loads(stdout)["final"]["step"] == 4
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,d_loss,g_loss,per_pixel_mean_error,mmd2" and len(lines) == 3
    assert read_pgm(out / "samples.pgm").shape == (8 * 9 - 1, 8 * 9 - 1)

    grid = tmp_path / "g.pgm"
    assert run(capsys, "sample", "--ckpt", str(out / "checkpoint.hagn"), "--n", "5", "--cols", "3",
               "--out", str(grid))[0] == 0
    first = grid.read_bytes()
    assert read_pgm(grid).shape == (2 * 9 - 1, 3 * 9 - 1)
    run(capsys, "sample", "--ckpt", str(out / "checkpoint.hagn"), "--n", "5", "--cols", "3", "--out", str(grid))
    assert grid.read_bytes() == first


def test_train_is_deterministic(capsys, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "train", "--config", json.dumps(TINY_TRAIN), "--out", str(tmp_path / name))[0] == 0
    for f in ("metrics.csv", "checkpoint.hagn", "samples.pgm"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


@pytest.mark.parametrize("n,cols", [("0", "2"), ("3", "0")])
def test_sample_bad_counts(capsys, tmp_path, n, cols):
    run(capsys, "train", "--config", json.dumps(TINY_TRAIN), "--out", str(tmp_path))
    assert run(capsys, "sample", "--ckpt", str(tmp_path / "checkpoint.hagn"), "--n", n, "--cols", cols,
               "--out", str(tmp_path / "x.pgm"))[0] == 1
