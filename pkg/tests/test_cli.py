import json
import subprocess
import sys

import pytest

from diffpose.cli import main
from diffpose.data import load_keypoint_annotations, write_annotations

from conftest import TINY


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """make-data -> train -> infer, shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "epochs": 2, "batch_size": 4, "N": 2, "steps": 2}))
    assert main(["make-data", "--config", str(cfg), "--out", str(root / "data"), "--count", "6", "--seed", "3"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    assert main(["infer", "--checkpoint", str(root / "run/checkpoints/last"), "--data", str(root / "data"),
                 "--out", str(root / "pred.json")]) == 0
    return root


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def test_pipeline_outputs(workspace):
    run = workspace / "run"
    assert (run / "loss.csv").read_text().startswith("epoch,step,lr,loss\n")
    assert (run / "checkpoints/epoch_001/manifest.json").is_file()
    preds = json.loads((workspace / "pred.json").read_text())
    assert isinstance(preds, list) and len(preds) == 6
    assert {"image_id", "bbox", "keypoints", "score"} <= set(preds[0])
    assert len(preds[0]["keypoints"]) == 3 * TINY["num_joints"]


def test_eval_json_and_csv(workspace):
    out, table = workspace / "report.json", workspace / "report.csv"
    assert main(["eval", "--predictions", str(workspace / "pred.json"), "--data", str(workspace / "data"),
                 "--out", str(out), "--csv", str(table)]) == 0
    rep = json.loads(out.read_text())
    assert set(rep["mean"]) == {"0.05", "0.1", "0.2"}
    assert rep["num_clips"] == 6
    assert table.read_text().splitlines()[0] == "joint,pck@0.05,pck@0.1,pck@0.2,count"


def test_ground_truth_scores_perfectly(workspace, capsys):
    gt = workspace / "data/annotations.json"
    assert main(["eval", "--predictions", str(gt), "--gt", str(gt), "--thresholds", "0.01"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mean"]["0.01"] == 1.0


def test_ablate_and_plot(workspace):
    grid, fig = workspace / "grid.csv", workspace / "grid.svg"
    assert main(["ablate", "--checkpoint", str(workspace / "run/checkpoints/last"), "--data",
                 str(workspace / "data"), "--out", str(grid), "--figure", str(fig)]) == 0
    lines = grid.read_text().splitlines()
    assert lines[0].startswith("N,steps,all_pck@0.05")
    assert len(lines) == 10
    assert fig.read_text().lstrip().startswith("<?xml")
    svg = workspace / "loss.svg"
    assert main(["plot", "--input", str(workspace / "run/loss.csv"), "--x", "step", "--y", "loss",
                 "--log-y", "--out", str(svg)]) == 0
    first = svg.read_bytes()
    assert main(["plot", "--input", str(workspace / "run/loss.csv"), "--x", "step", "--y", "loss",
                 "--log-y", "--out", str(svg)]) == 0
    assert svg.read_bytes() == first


def test_rerun_is_byte_identical(workspace, tmp_path):
    cfg = workspace / "cfg.json"
    assert main(["make-data", "--config", str(cfg), "--out", str(tmp_path / "data"), "--count", "6", "--seed", "3"]) == 0
    for f in (workspace / "data").rglob("*"):
        if f.is_file():
            assert (tmp_path / "data" / f.relative_to(workspace / "data")).read_bytes() == f.read_bytes()
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "data"), "--out", str(tmp_path / "run")]) == 0
    for name in ("loss.csv", "checkpoints/last/tensors.f32", "checkpoints/last/manifest.json"):
        assert (tmp_path / "run" / name).read_bytes() == (workspace / "run" / name).read_bytes()
    assert main(["infer", "--checkpoint", str(tmp_path / "run/checkpoints/last"), "--data",
                 str(tmp_path / "data"), "--out", str(tmp_path / "pred.json")]) == 0
    assert (tmp_path / "pred.json").read_bytes() == (workspace / "pred.json").read_bytes()


def test_predictions_roundtrip(workspace, tmp_path):
    recs = load_keypoint_annotations(workspace / "pred.json")
    write_annotations(recs, tmp_path / "again.json", bare=True)
    assert (tmp_path / "again.json").read_bytes() == (workspace / "pred.json").read_bytes()


def test_unknown_flag(capsys):
    assert main(["train", "--bogus"]) == 2
    assert _error_line(capsys)["error"] == "usage"


def test_missing_subcommand(capsys):
    assert main([]) == 2
    assert _error_line(capsys)["error"] == "usage"


def test_missing_dataset(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert _error_line(capsys)["error"] == "io"


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"learning_rate": 1}')
    assert main(["make-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--count", "1"]) == 2
    line = _error_line(capsys)
    assert line["error"] == "config" and "learning_rate" in line["message"]


def test_missing_config_file(tmp_path, capsys):
    assert main(["make-data", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path), "--count", "1"]) == 2
    assert _error_line(capsys)["error"] == "config"


def test_malformed_predictions(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('[{"image_id": 0, "bbox": [0, 0, 1, 1], "keypoints": [1, 2]}]')
    assert main(["eval", "--predictions", str(bad), "--data", str(workspace / "data")]) == 2
    line = _error_line(capsys)
    assert line["error"] == "parse" and "record 0" in line["message"]


def test_plot_unknown_column(workspace, tmp_path, capsys):
    assert main(["plot", "--input", str(workspace / "run/loss.csv"), "--x", "step", "--y", "acc",
                 "--out", str(tmp_path / "x.svg")]) == 2
    assert _error_line(capsys)["error"] == "config"


def test_console_entry_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "diffpose.cli", "eval", "--predictions",
                           str(tmp_path / "missing.json"), "--gt", str(tmp_path / "missing.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "parse"
