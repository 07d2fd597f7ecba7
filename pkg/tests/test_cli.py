import csv
import subprocess
import sys

import numpy as np
import pytest

import transmrsr.cli as cli
from transmrsr.cli import main
from transmrsr.losses import CSV_COLUMNS
from transmrsr.prior import CentroidBank, DivergenceError
from transmrsr.volume import read_volume


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantoms", "--out", str(root / "train"), "--count", "2", "--dims", "64", "16", "64",
                 "--seed", "1", "--labels"]) == 0
    assert main(["phantoms", "--out", str(root / "val"), "--count", "1", "--dims", "64", "16", "64",
                 "--seed", "2", "--labels"]) == 0
    return root


def test_phantoms_written(workspace):
    files = sorted(p.name for p in (workspace / "train").iterdir())
    assert files == ["phantom_000.labels.tmrv", "phantom_000.tmrv", "phantom_001.labels.tmrv", "phantom_001.tmrv"]
    assert read_volume(workspace / "train" / "phantom_000.tmrv").dims == (64, 16, 64)


def test_seed_from_environment(tmp_path, monkeypatch):
    assert main(["phantoms", "--out", str(tmp_path / "a"), "--count", "1", "--dims", "16", "16", "16",
                 "--seed", "9"]) == 0
    monkeypatch.setenv("TMRSR_SEED", "9")
    assert main(["phantoms", "--out", str(tmp_path / "b"), "--count", "1", "--dims", "16", "16", "16"]) == 0
    a = (tmp_path / "a" / "phantom_000.tmrv").read_bytes()
    assert a == (tmp_path / "b" / "phantom_000.tmrv").read_bytes()


def test_degrade(workspace, tmp_path):
    src = workspace / "train" / "phantom_000.tmrv"
    assert main(["degrade", "--in", str(src), "--out", str(tmp_path / "lr.tmrv"), "--r", "4"]) == 0
    assert read_volume(tmp_path / "lr.tmrv").dims == (64, 16, 16)
    assert main(["degrade", "--in", str(src), "--out", str(tmp_path / "i.tmrv"), "--r", "4", "--interpolate"]) == 0
    assert read_volume(tmp_path / "i.tmrv").dims == (64, 16, 64)


def test_bad_volume_exit_code(tmp_path):
    (tmp_path / "bad.tmrv").write_bytes(b"junk" * 10)
    assert main(["degrade", "--in", str(tmp_path / "bad.tmrv"), "--out", str(tmp_path / "o")]) == 3
    assert main(["degrade", "--in", str(tmp_path / "missing.tmrv"), "--out", str(tmp_path / "o")]) == 3


def test_end_to_end(workspace):
    w = workspace
    assert main(["pretrain", "--data", str(w / "train"), "--out", str(w / "gan.pt"), "--steps", "2",
                 "--batch-size", "2", "--samples", str(w / "samples"), "--sample-every", "2"]) == 0
    assert (w / "samples" / "samples_000002.pgm").exists()
    assert main(["cluster-latents", "--checkpoint", str(w / "gan.pt"), "--m", "200", "--n", "4",
                 "--out", str(w / "bank.tmcb")]) == 0
    assert CentroidBank.load(w / "bank.tmcb").centers.shape == (4, 64)

    (w / "train.cfg").write_text("# toy run\nlr=1e-4\nbatch_size=4\nbackbone_width=0.0625\n")
    assert main(["train-sr", "--train", str(w / "train"), "--val", str(w / "val"), "--out", str(w / "ckpt"),
                 "--config", str(w / "train.cfg"), "--prior", str(w / "gan.pt"), "--bank", str(w / "bank.tmcb"),
                 "--r", "4", "--max-epochs", "1", "--max-steps", "2", "--profile", "toy"]) == 0
    assert (w / "ckpt" / "best.pt").exists() and (w / "ckpt" / "last.pt").exists()

    hr = w / "val" / "phantom_000.tmrv"
    assert main(["degrade", "--in", str(hr), "--out", str(w / "lr.tmrv"), "--r", "4"]) == 0
    assert main(["infer", "--checkpoint", str(w / "ckpt" / "best.pt"), "--in", str(w / "lr.tmrv"),
                 "--out", str(w / "sr.tmrv"), "--hr", str(hr), "--emit-slices", str(w / "slices")]) == 0
    assert read_volume(w / "sr.tmrv").dims == read_volume(hr).dims
    assert len(list((w / "slices").glob("error_*.pgm"))) == 16

    seg = str(w / "val" / "phantom_000.labels.tmrv")
    assert main(["evaluate", "--checkpoint", str(w / "ckpt" / "best.pt"), "--volumes", str(w / "val"),
                 "--out", str(w / "metrics.csv"), "--seg-sr", seg, "--seg-hr", seg]) == 0
    with open(w / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_COLUMNS
    assert [r["volume_id"] for r in rows] == ["phantom_000", "mean"]
    assert float(rows[-1]["dice_avg"]) == 1.0
    assert np.isfinite(float(rows[-1]["psnr"]))

    # scale mismatch against the checkpoint is a config error
    assert main(["evaluate", "--checkpoint", str(w / "ckpt" / "best.pt"), "--volumes", str(w / "val"),
                 "--out", str(w / "m8.csv"), "--r", "8"]) == 2
    # only one segmentation source is a data error
    assert main(["evaluate", "--checkpoint", str(w / "ckpt" / "best.pt"), "--volumes", str(w / "val"),
                 "--out", str(w / "m.csv"), "--seg-sr", seg]) == 3


def test_config_errors(workspace, tmp_path):
    (tmp_path / "bad.cfg").write_text("learning_rate=0.1\n")
    args = ["train-sr", "--train", str(workspace / "train"), "--out", str(tmp_path / "c"), "--profile", "toy"]
    assert main(args + ["--config", str(tmp_path / "bad.cfg")]) == 2
    (tmp_path / "bad2.cfg").write_text("lr=fast\n")
    assert main(args + ["--config", str(tmp_path / "bad2.cfg")]) == 2
    # the generative prior is on by default and needs --prior
    assert main(args) == 2


def test_empty_data_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["pretrain", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "g.pt")]) == 3


def test_divergence_exit_code(workspace, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("loss is nan")

    monkeypatch.setattr(cli, "pretrain", boom)
    assert main(["pretrain", "--data", str(workspace / "train"), "--out", str(tmp_path / "g.pt")]) == 4


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "transmrsr.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("phantoms", "degrade", "pretrain", "cluster-latents", "train-sr", "infer", "evaluate"):
        assert name in out.stdout
