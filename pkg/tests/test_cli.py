import json
import subprocess
import sys

import pytest

from mugnet.cli import main

TRAIN_INI = """[train]
epochs = 2
width = 4
mlp_width = 4
head_hidden = 4
budgets = 8 4 2
lr = 0.01
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "train.ini").write_text(TRAIN_INI)
    assert main(["synth", "--output", str(d / "room.ply"), "--points", "3000", "--seed", "1"]) == 0
    assert main(["cluster", "--input", str(d / "room.ply"), "--output", str(d / "room.graph.json")]) == 0
    return d


def test_full_chain(workdir, capsys):
    d = workdir
    ckpt = d / "model.json"
    assert main(["train", "--input", str(d / "room.graph.json"), "--output", str(ckpt), "--config", str(d / "train.ini")]) == 0
    assert ckpt.exists() and (d / "model.history.json").exists()
    assert len(json.loads((d / "model.history.json").read_text())) == 2
    assert main(["infer", "--input", str(d / "room.graph.json"), "--checkpoint", str(ckpt), "--output", str(d / "pred.ply")]) == 0
    metrics = d / "metrics.json"
    assert main(["eval", "--input", str(d / "pred.ply"), "--truth", str(d / "room.graph.json"), "--output", str(metrics)]) == 0
    m = json.loads(metrics.read_text())
    assert 0.0 <= m["OA"] <= 1.0 and [c["name"] for c in m["classes"]] == ["floor", "wall", "box"]
    csv_path = d / "bench.csv"
    args = ["bench", "--input", str(d / "room.graph.json"), "--checkpoint", str(ckpt), "--copies", "2", "--batch-sizes", "1,2", "--output", str(csv_path)]
    assert main(args) == 0
    assert csv_path.read_text().splitlines()[0].startswith("batch_size")


def test_missing_checkpoint_is_data_error(workdir, capsys):
    d = workdir
    code = main(["infer", "--input", str(d / "room.graph.json"), "--checkpoint", str(d / "nope.json"), "--output", str(d / "x.xyz")])
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_eval_identical_files(workdir, capsys):
    d = workdir
    assert main(["eval", "--input", str(d / "room.ply"), "--truth", str(d / "room.ply")]) == 0
    row = capsys.readouterr().out.splitlines()[1]
    assert row.split("|")[0].strip() == "100.0" and row.split("|")[1].strip() == "100.0"


def test_usage_errors(workdir, capsys):
    assert main(["synth", "--output", "x.xyz", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["synth", "--output", str(workdir / "y.xyz"), "--points", "0"]) == 1
    assert main(["cluster", "--input", str(workdir / "room.ply"), "--output", "z", "--classes", "0"]) == 1


def test_bad_input_files(workdir, tmp_path):
    bad = tmp_path / "bad.xyz"
    bad.write_text("1 2 three\n")
    assert main(["cluster", "--input", str(bad), "--output", str(tmp_path / "g.json")]) == 2
    ini = tmp_path / "p.ini"
    ini.write_text("[partition]\nradius = 3\n")
    assert main(["cluster", "--input", str(workdir / "room.ply"), "--output", str(tmp_path / "g.json"), "--config", str(ini)]) == 2
    assert main(["train", "--input", str(tmp_path / "missing.json"), "--output", str(tmp_path / "m.json")]) == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "s.xyz"
    proc = subprocess.run(
        [sys.executable, "-m", "mugnet", "synth", "--output", str(out), "--points", "200"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert len(out.read_text().splitlines()) >= 200
    proc = subprocess.run([sys.executable, "-m", "mugnet", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 1
