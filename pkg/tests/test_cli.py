import csv
import os

import numpy as np
import pytest

from latentflow.cli import main
from latentflow.manifest import sha256_file

FAST = [
    "--set", "data.size=256",
    "--set", "train.epochs=1",
    "--set", "train.batch=64",
    "--set", "train.warmup_steps=2",
    "--set", "model.depth=2",
    "--set", "model.hidden_dim=16",
    "--set", "model.heads=2",
    "--set", "model.expert_layers=0",
    "--set", "model.fourier_freqs=8",
]


def run_cli(*argv):
    rc = main(list(argv))
    assert rc == 0, f"CLI failed: {argv}"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    data_dir = out / "data"
    run_cli("gen-data", "--out", str(data_dir), "--set", "data.size=256")
    data_path = str(data_dir / "shapes.lfds")
    train_dir = out / "run"
    run_cli("train", "--out", str(train_dir), *FAST,
            "--set", f"data.path={data_path}")
    return dict(out=out, data=data_path, ckpt=str(train_dir / "ckpt_final.lfck"),
                train_dir=train_dir)


def test_gen_data_manifest_reproducible(tmp_path):
    run_cli("gen-data", "--out", str(tmp_path / "a"), "--set", "data.size=64")
    run_cli("gen-data", "--out", str(tmp_path / "b"), "--set", "data.size=64")
    ma = (tmp_path / "a" / "manifest.txt").read_text()
    mb = (tmp_path / "b" / "manifest.txt").read_text()
    assert ma == mb and "shapes.lfds" in ma


def test_train_artifacts(trained):
    d = trained["train_dir"]
    for name in ("ckpt_final.lfck", "ckpt_weak.lfck", "train_log.csv",
                 "config.cfg", "manifest.txt"):
        assert os.path.exists(d / name), name
    manifest = (d / "manifest.txt").read_text()
    for line in manifest.splitlines():
        digest, rel = line.split("  ")
        assert sha256_file(d / rel) == digest


def test_sample_writes_grid(trained, tmp_path):
    out = tmp_path / "samples"
    run_cli("sample", "--out", str(out), "--ckpt", trained["ckpt"],
            "--n", "8", "--steps", "4", "--seed", "1")
    images = np.load(out / "samples.npy")
    assert images.shape == (8, 16, 16, 3)
    assert (out / "samples.ppm").exists()


def test_sample_deterministic(trained, tmp_path):
    for sub in ("s1", "s2"):
        run_cli("sample", "--out", str(tmp_path / sub), "--ckpt", trained["ckpt"],
                "--n", "4", "--steps", "4", "--seed", "7")
    a = np.load(tmp_path / "s1" / "samples.npy")
    b = np.load(tmp_path / "s2" / "samples.npy")
    assert np.array_equal(a, b)


def test_sample_guidance_flags(trained, tmp_path):
    run_cli("sample", "--out", str(tmp_path / "g"), "--ckpt", trained["ckpt"],
            "--n", "4", "--steps", "4", "--guidance", "cfg", "--omega", "2.0",
            "--interval", "0.06:1.0", "--seed", "3")
    assert (tmp_path / "g" / "samples.npy").exists()


def test_sample_autoguidance_weak_ckpt(trained, tmp_path):
    weak = str(trained["train_dir"] / "ckpt_weak.lfck")
    run_cli("sample", "--out", str(tmp_path / "ag"), "--ckpt", trained["ckpt"],
            "--n", "4", "--steps", "4", "--guidance", "autoguidance",
            "--omega", "1.5", "--weak-ckpt", weak, "--seed", "3")
    assert (tmp_path / "ag" / "samples.npy").exists()


def test_eval_fd(trained, tmp_path):
    out = tmp_path / "fd"
    run_cli("eval-fd", "--out", str(out), "--ckpt", trained["ckpt"],
            "--n", "64", "--steps", "4", "--schedule", "identity")
    with open(out / "eval_fd.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["n", "frechet_distance"]
    assert float(rows[1][1]) >= 0


def test_snr_trace(tmp_path):
    out = tmp_path / "trace"
    run_cli("snr-trace", "--out", str(out), "--schedule", "cascaded",
            "--steps", "10")
    with open(out / "snr_trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 12  # header + 11 knots
    assert rows[-1][3] == "inf"


def test_psnr_grid(trained, tmp_path):
    out = tmp_path / "grid"
    run_cli("psnr-grid", "--out", str(out), "--ckpt", trained["ckpt"],
            "--data", trained["data"], "--n", "32", "--grid-points", "3")
    with open(out / "psnr_grid.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 10  # header + 9 cells
    assert rows[0][:2] == ["t_latent", "t_pixel"]


def test_sweep_order_cli(trained, tmp_path):
    out = tmp_path / "order"
    run_cli("sweep-order", "--out", str(out), "--ckpt", trained["ckpt"],
            "--n", "64", "--alphas", "1/16,16", "--steps", "4")
    with open(out / "sweep_order.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["0.0625", "16.0"]


def test_sweep_ablate_cli(trained, tmp_path):
    out = tmp_path / "ablate"
    run_cli("sweep-ablate", "--out", str(out), "--axis", "beta",
            "--runs", f"0.25={trained['ckpt']}", "--n", "64")
    assert (out / "sweep_beta.csv").exists()


def test_sweep_ablate_requires_runs(tmp_path):
    rc = main(["sweep-ablate", "--out", str(tmp_path / "x"), "--axis", "beta",
               "--n", "8"])
    assert rc == 2


def test_bad_config_key_fails(tmp_path):
    rc = main(["gen-data", "--out", str(tmp_path / "x"), "--set", "nope=1"])
    assert rc == 2
