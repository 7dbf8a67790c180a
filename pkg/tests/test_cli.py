import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from epictrl.cli import DEFAULT_CONFIG, ConfigError, Manifest, PipelineConfig, build_report, main
from epictrl.sim import read_csv

QUICK = {"data": {"input_noise_std": 1e-6, "output_noise_std": 1e-6}, "estimation": {"multistart_count": 1}}
ARTIFACTS = ["theta_table.csv", "gains.json", "state_estimate.csv", "output_tracking.csv", "policy.csv",
             "predicted.csv", "e_forecast.csv"]


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json", QUICK)
    code = main(["pipeline", "--config", cfg, "--output", str(root / "out")])
    return code, root / "out", cfg


def test_config_roundtrip():
    cfg = PipelineConfig.from_dict(QUICK)
    again = PipelineConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict()
    assert PipelineConfig().to_dict() == DEFAULT_CONFIG


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="observer.gain"):
        PipelineConfig.from_dict({"observer": {"gain": 1}})


def test_zero_span_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"data": {"t1": 0.0}})
    assert main(["pipeline", "--config", cfg, "--output", str(tmp_path / "o")]) == 2


def test_unwritable_output_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", "--output", str(blocker / "sub")]) == 2


def test_generate_without_noise_records_truth(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"data": {"input_noise_std": 0.0, "output_noise_std": 0.0}})
    assert main(["generate", "--config", cfg, "--output", str(tmp_path)]) == 0
    names, data = read_csv(tmp_path / "data.csv")
    _, truth = read_csv(tmp_path / "truth.csv")
    assert names[5:] == [f"y{i}" for i in range(1, 11)]
    assert np.array_equal(data[:, 5:], truth[:, 7:])


def test_generate_is_reproducible(tmp_path):
    hashes = []
    for sub in ("a", "b"):
        assert main(["generate", "--output", str(tmp_path / sub)]) == 0
        hashes.append(Manifest.load(tmp_path / sub).stage("generate")["outputs"])
    assert hashes[0] == hashes[1]


def test_env_var_sets_output(tmp_path, monkeypatch):
    monkeypatch.setenv("EPICTRL_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["generate"]) == 0
    assert (tmp_path / "env" / "data.csv").is_file()


def test_stage_needs_its_inputs(tmp_path):
    assert main(["estimate", "--output", str(tmp_path)]) == 2


def test_pipeline_produces_artifacts(quick_run):
    code, out, _ = quick_run
    assert code == 0
    for name in ARTIFACTS:
        assert (out / name).is_file(), name
    man = Manifest.load(out)
    assert man.missing() == []
    for entry in man.doc["stages"].values():
        assert entry["status"] == "ok" and entry["outputs"]


def test_report(quick_run, capsys):
    _, out, _ = quick_run
    assert main(["report", "--output", str(out)]) == 0
    text = capsys.readouterr().out
    rows = (out / "report.csv").read_text().splitlines()
    assert rows[0] == "parameter,true,estimated" and len(rows) == 10
    assert "terminal estimation error" in text and "baseline policy cost" in text


def test_report_without_truth(quick_run, tmp_path):
    _, out, _ = quick_run
    copy = tmp_path / "real"
    shutil.copytree(out, copy)
    man = Manifest.load(copy)
    man.doc["config"]["data"]["path"] = "recorded.csv"
    man.save()
    _, table = build_report(copy)
    assert table.splitlines()[0] == "parameter,estimated"


def test_report_detects_tampering(quick_run, tmp_path, capsys):
    _, out, _ = quick_run
    copy = tmp_path / "tampered"
    shutil.copytree(out, copy)
    with open(copy / "policy.csv", "a") as fh:
        fh.write("0,0,0,0,0\n")
    assert main(["report", "--output", str(copy)]) == 2
    assert "policy.csv" in capsys.readouterr().err


def test_report_lists_missing_stages(tmp_path, capsys):
    assert main(["generate", "--output", str(tmp_path)]) == 0
    assert main(["report", "--output", str(tmp_path)]) == 2
    assert "identify" in capsys.readouterr().err


def test_zero_output_matrix_exits_5(quick_run, tmp_path):
    _, out, _ = quick_run
    copy = tmp_path / "sdp"
    shutil.copytree(out, copy)
    cfg = write_config(tmp_path / "c.json", {**QUICK, "observer": {"C_hat_override": "zero"}})
    assert main(["design-observer", "--config", cfg, "--output", str(copy)]) == 5


def test_pipeline_is_byte_identical_on_rerun(quick_run, tmp_path):
    _, out, cfg = quick_run
    assert main(["pipeline", "--config", cfg, "--output", str(tmp_path)]) == 0
    a = Manifest.load(out).doc["stages"]
    b = Manifest.load(tmp_path).doc["stages"]
    assert {k: v["outputs"] for k, v in a.items()} == {k: v["outputs"] for k, v in b.items()}


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "epictrl", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "pipeline" in r.stdout
