import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from spikegrid.bev import BevConfig, dump_pointcloud
from spikegrid.cli import main
from spikegrid.core import RngStream, load_tensor, save_tensor
from spikegrid.energy import table3_rates, write_rates
from spikegrid.scenes import gen_scene


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    scene = gen_scene(RngStream(2, 2), BevConfig.scaled(8), 3)
    (d / "pc.bin").write_bytes(dump_pointcloud(scene.points))
    assert main(["ingest", str(d / "pc.bin"), "--scale", "8", "-o", str(d / "frame.bevt")]) == 0
    assert main(["train", "--epochs", "1", "--steps-per-epoch", "2", "--batch", "1",
                 "--out", str(d / "run")]) == 0
    return d


def test_ingest_writes_frame(work):
    frame = load_tensor(work / "frame.bevt")
    assert frame.shape == (1, 11, 40, 40) and frame[0, 1].sum() > 0


def test_train_outputs(work):
    names = {p.name for p in (work / "run").iterdir()}
    assert {"model.sgck", "metrics.csv", "steps.csv", "config.ini", "firing_rate.png"} <= names


def test_encode_stats_on_zero_frame(tmp_path, capsys):
    save_tensor(tmp_path / "z.bevt", np.zeros((1, 11, 8, 8), np.float32))
    assert main(["encode", str(tmp_path / "z.bevt"), "--encoder", "poisson", "--steps", "13",
                 "--stats", "-o", str(tmp_path / "s.bevt")]) == 0
    out = capsys.readouterr().out
    assert "rate=0.000000" in out
    assert load_tensor(tmp_path / "s.bevt").shape == (13, 11, 8, 8)


def test_infer_variants(work):
    for variant in ("spike", "vmem"):
        rc = main(["infer", str(work / "run" / "model.sgck"), "--frame", str(work / "frame.bevt"),
                   "--variant", variant, "--threshold", "0.0", "-o", str(work / f"{variant}.csv")])
        assert rc == 0
    with open(work / "spike.csv") as fh:
        scores = [float(r["score"]) for r in csv.DictReader(fh)]
    assert scores
    assert all(abs(s * 13 - round(s * 13)) < 1e-4 for s in scores)
    assert (work / "vmem.csv").read_text().startswith("frame,row,col")


def test_energy_with_rates_file(tmp_path, capsys):
    write_rates(tmp_path / "table3.csv", table3_rates())
    assert main(["energy", "--canonical", "--rates", str(tmp_path / "table3.csv"),
                 "-o", str(tmp_path / "e.csv"), "--export-graph", str(tmp_path / "g.ini")]) == 0
    assert "ratio 3.33x" in capsys.readouterr().out
    assert (tmp_path / "e.png").stat().st_size > 0
    assert main(["energy", "--graph", str(tmp_path / "g.ini"), "--table3",
                 "-o", str(tmp_path / "e2.csv")]) == 0
    body = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("# firing")]
    assert body(tmp_path / "e.csv") == body(tmp_path / "e2.csv")


def test_energy_from_checkpoint(work):
    assert main(["energy", "--checkpoint", str(work / "run" / "model.sgck"), "--frames", "2",
                 "-o", str(work / "measured.csv")]) == 0
    assert "synthetic held-out scenes" in (work / "measured.csv").read_text().splitlines()[0]


def test_selftest():
    assert main(["selftest"]) == 0


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--no-such-flag"],
    ["energy", "--canonical"],
    ["encode", "x", "--encoder", "morse"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_validation_errors_exit_1(tmp_path):
    (tmp_path / "bad.ini").write_text("[train]\nepochs = zero\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) == 1
    (tmp_path / "odd.bin").write_bytes(bytes(17))
    assert main(["ingest", str(tmp_path / "odd.bin"), "-o", str(tmp_path / "f.bevt")]) == 1
    save_tensor(tmp_path / "f.bevt", np.zeros((1, 3, 4, 4), np.float32))
    assert main(["encode", str(tmp_path / "f.bevt")]) == 1
    (tmp_path / "junk.sgck").write_bytes(b"SGCK")
    assert main(["infer", str(tmp_path / "junk.sgck"), "--synthetic", "1"]) == 1


def test_runtime_errors_exit_2(tmp_path):
    assert main(["ingest", str(tmp_path / "missing.bin"), "-o", str(tmp_path / "x.bevt")]) == 2


def test_console_entry_point(tmp_path):
    env = dict(os.environ, SPIKEGRID_THREADS="1")
    p = subprocess.run([sys.executable, "-m", "spikegrid.cli", "energy", "--canonical", "--table3",
                        "-o", str(tmp_path / "e.csv")], capture_output=True, text=True, env=env)
    assert p.returncode == 0 and "43.3x" in p.stdout
