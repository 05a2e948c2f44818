import json
import subprocess
import sys

import numpy as np
import pytest

from ribpoint import io
from ribpoint.cli import main

SMALL = ["--dims", "96,96,96"]
SMALL_CFG = {"rib_radius_mm": 2.0, "vertebra_radius_mm": 4.0}


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "phantom.json"
    cfg.write_text(json.dumps(SMALL_CFG))
    rc = main(["synth", "--train", "2", "--dev", "1", "--test", "1",
               "--seed", "17", *SMALL, "--config", str(cfg),
               "--out", str(root / "data")])
    assert rc == 0
    return root


def test_synth_writes_cases_and_run_config(cli_dataset):
    data = cli_dataset / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert sum(len(v) for v in manifest["splits"].values()) == 4
    run = json.loads((data / "run_config.json").read_text())
    assert run["command"] == "synth"
    assert run["version"]
    assert run["resolved"]["seed"] == 17
    assert run["resolved"]["rib_radius_mm"] == 2.0  # config file honored


def test_binarize_and_sample(cli_dataset):
    data = cli_dataset / "data"
    out = cli_dataset / "bin"
    rc = main(["binarize", "--in", str(data / "case_0000/volume.rvol"),
               "--out", str(out / "mask.rvol")])
    assert rc == 0
    mask = io.read_rvol(out / "mask.rvol")
    assert mask.count > 0
    rc = main(["sample", "--in", str(data / "case_0000/volume.rvol"),
               "--n", "5000", "--seed", "3",
               "--out", str(out / "pts.rpts")])
    assert rc == 0
    coords, labels = io.read_rpts(out / "pts.rpts")
    assert coords.shape == (5000, 3)


def test_train_infer_eval_centerline(cli_dataset):
    data = cli_dataset / "data"
    run = cli_dataset / "run"
    rc = main(["train", "--data", str(data), "--out", str(run),
               "--epochs", "2", "--batch-size", "2", "--points", "4096",
               "--seed", "5"])
    assert rc == 0
    assert (run / "checkpoint_final.rckp").exists()
    history = json.loads((run / "history.json").read_text())
    assert len(history) == 2
    assert history[0]["lr"] == pytest.approx(1e-3)

    pred = cli_dataset / "pred"
    rc = main(["infer", "--ckpt", str(run / "checkpoint_final.rckp"),
               "--in", str(data / "case_0003/volume.rvol"),
               "--points", "20000", "--out", str(pred),
               "--gt", str(data / "case_0003/truth_labels.rvol")])
    assert rc == 0
    metrics = json.loads((pred / "infer_metrics.json").read_text())
    assert "dice_point" in metrics

    ev = cli_dataset / "eval"
    rc = main(["eval", "--pred", str(pred / "pred_mask.rvol"),
               "--gt", str(data / "case_0003/truth_labels.rvol"),
               "--meta", str(data / "case_0003/meta.json"),
               "--out", str(ev)])
    assert rc == 0
    report = json.loads((ev / "eval_report.json").read_text())
    assert set(report["missing_ratio"]) == {"A", "F", "I", "T"}
    assert 0.0 <= report["dice_voxel"] <= 1.0
    assert (ev / "eval_report.csv").read_text().startswith("case,metric,value")

    cl = cli_dataset / "cl.json"
    rc = main(["centerline", "--in", str(data / "case_0003/truth_labels.rvol"),
               "--out", str(cl)])
    assert rc == 0
    doc = json.loads(cl.read_text())
    assert len(doc["ribs"]) >= 22
    for rib in doc["ribs"]:
        assert rib["arc_length_mm"] > 0
        assert len(rib["points_mm"]) >= 2

    # every artifact directory carries the resolved config and version
    for artifact_dir in (run, pred, ev):
        record = json.loads((artifact_dir / "run_config.json").read_text())
        assert record["version"] and record["resolved"] is not None


def test_missing_input_is_processing_error(tmp_path, capsys):
    rc = main(["binarize", "--in", str(tmp_path / "nope.rvol"),
               "--out", str(tmp_path / "m.rvol")])
    assert rc == 1
    err = capsys.readouterr().err
    record = json.loads(err.strip().splitlines()[-1])
    assert record["error"]
    assert "message" in record


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == 2


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_a_key": 1}))
    rc = main(["sample", "--in", str(tmp_path / "x.rvol"),
               "--config", str(cfg), "--out", str(tmp_path / "p.rpts")])
    assert rc == 1


def test_cli_version_flag():
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "ribpoint.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.strip() == "0.1.0"
