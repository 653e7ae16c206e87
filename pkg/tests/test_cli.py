import json
import subprocess
import sys

import pytest

from tcfusion.bst import read_bst
from tcfusion.cli import main
from tcfusion.samples import load_dataset
from conftest import STORM_1953_BST, run_pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe")).parent


def test_ingest_1953_storm_reports_one_track(tmp_path, capsys):
    bst = tmp_path / "t2.bst"
    bst.write_text(STORM_1953_BST)
    assert main(["ingest", "--bst", str(bst), "--no-gph", "--out", str(tmp_path / "o")]) == 0
    report = (tmp_path / "o" / "ingest_report.txt").read_text()
    assert "tracks read: 1" in report
    assert "tracks kept (life cycle filter): 0" in report
    assert not (tmp_path / "o" / "dataset.npz").exists()


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.bst"
    assert main(["ingest", "--bst", str(missing), "--no-gph", "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "ingest"


def test_missing_input_without_env_var(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("TCFUSION_DATA", raising=False)
    assert main(["ingest", "--no-gph", "--out", str(tmp_path)]) == 2
    assert "TCFUSION_DATA" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path):
    assert main(["train", "--stage", "9"]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_key = 3\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_rerun_ingest_gives_identical_dataset(pipeline, tmp_path):
    argv = ["ingest", "--bst", str(pipeline / "synth" / "tracks.bst"), "--gph", str(pipeline / "synth" / "gph"),
            "--config", str(pipeline / "run.cfg"), "--out", str(tmp_path)]
    assert main(argv) == 0
    assert (tmp_path / "dataset.npz").read_bytes() == (pipeline / "data" / "dataset.npz").read_bytes()
    _, _, meta = load_dataset(tmp_path / "dataset.npz")
    assert len(meta["data_hash"]) == 16


def test_outputs_and_manifests(pipeline):
    for step in ("synth", "data", "train", "eval"):
        manifest = json.loads((pipeline / step / "manifest.json").read_text())
        assert {"command", "config", "seed", "inputs", "outputs", "wall_time_s"} <= set(manifest)
    train = json.loads((pipeline / "train" / "manifest.json").read_text())
    assert train["seed"] == 0 and any(k.endswith("dataset.npz") for k in train["inputs"])
    metrics = (pipeline / "train" / "metrics.tsv").read_text().splitlines()
    assert metrics[0].split("\t") == ["stage", "epoch", "train_loss", "val_mde_24h"]


def test_baseline_adds_skill_columns(pipeline):
    text = (pipeline / "eval" / "report.tsv").read_text()
    assert text.startswith("# reference=cliper")
    head = text.splitlines()[1].split("\t")
    assert head[:6] == ["method", "n", "6h", "12h", "18h", "24h"] and "skill_24h" in head
    methods = [line.split("\t")[0] for line in text.splitlines()[2:]]
    assert methods == ["fusion", "cliper", "extrapolation"]
    assert "AVG" in (pipeline / "eval" / "cases.tsv").read_text()


def test_predict_gives_four_rows(pipeline, tmp_path):
    track = read_bst(pipeline / "synth" / "tracks.bst").tracks[0]
    when = track.observations[10].timestamp.strftime("%Y%m%d%H")
    argv = ["predict", "--checkpoint", str(pipeline / "train" / "checkpoint.npz"),
            "--bst", str(pipeline / "synth" / "tracks.bst"), "--gph", str(pipeline / "synth" / "gph"),
            "--storm", track.storm_id, "--time", when, "--out", str(tmp_path)]
    assert main(argv) == 0
    rows = [r for r in (tmp_path / "forecast.tsv").read_text().splitlines() if r and not r.startswith("#")]
    assert len(rows) == 5  # header + 6/12/18/24 h


def test_predict_unknown_storm(pipeline, tmp_path, capsys):
    argv = ["predict", "--checkpoint", str(pipeline / "train" / "checkpoint.npz"),
            "--bst", str(pipeline / "synth" / "tracks.bst"), "--gph", str(pipeline / "synth" / "gph"),
            "--storm", "NOPE", "--time", "2000010100", "--out", str(tmp_path)]
    assert main(argv) == 2
    assert "NOPE" in capsys.readouterr().err


def test_checkpoint_dataset_mismatch_refused(pipeline, tmp_path, capsys):
    cfg = tmp_path / "other.cfg"
    cfg.write_text((pipeline / "run.cfg").read_text().replace("q = 13", "q = 15"))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert main(["ingest", "--bst", str(tmp_path / "s" / "tracks.bst"), "--gph", str(tmp_path / "s" / "gph"),
                 "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    code = main(["evaluate", "--checkpoint", str(pipeline / "train" / "checkpoint.npz"),
                 "--data", str(tmp_path / "d" / "dataset.npz"), "--out", str(tmp_path / "e")])
    assert code == 2
    assert "trained on data config" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "tcfusion", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "synth" in out.stdout
