import json
import os
import signal
import subprocess
import sys
import time

import numpy as np
import pytest

from unlearnlab.cli import main
from unlearnlab.data import load_manifest_dataset, write_idx

CONFIG = {
    "dataset": {"synthetic": {"classes": 3, "per_class": 48, "image_size": 8, "noise": 0.2}},
    "architecture": {"kind": "ResNetS", "image_size": 8, "widths": [4, 8, 8], "blocks_per_stage": 1},
    "train": {"epochs": 8, "batch_size": 16},
    "methods": [
        {"method": "SalUn", "epochs": 1, "batch_size": 16},
        {"method": "RandomLabel", "epochs": 1, "batch_size": 16},
        {"method": "GradientAscent", "epochs": 1, "batch_size": 16},
    ],
    "rates": [0.1, 0.5],
    "scenarios": ["NoAug", "Default"],
}


def _write_config(tmp_path, **over):
    cfg = dict(CONFIG, **over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_synth_then_load(tmp_path, capsys):
    assert main(["synth", "--classes", "4", "--per-class", "16", "--size", "8", "--out", str(tmp_path / "d")]) == 0
    splits = load_manifest_dataset(tmp_path / "d")
    assert sum(len(s) for s in splits.values()) == 64
    assert "train=40" in capsys.readouterr().out


def test_convert_idx(tmp_path):
    gen = np.random.default_rng(0)
    write_idx(tmp_path / "ti", gen.integers(0, 256, (6, 4, 4), dtype=np.uint8))
    write_idx(tmp_path / "tl", np.array([0, 1, 2, 0, 1, 2], np.uint8))
    rc = main([
        "convert", "--train-images", str(tmp_path / "ti"), "--train-labels", str(tmp_path / "tl"),
        "--num-classes", "3", "--out", str(tmp_path / "m"),
    ])
    assert rc == 0
    assert len(load_manifest_dataset(tmp_path / "m")["train"]) == 6


def test_convert_reports_format_errors(tmp_path, capsys):
    (tmp_path / "bad").write_bytes(bytes([0, 0, 0x0D, 1, 0, 0, 0, 1, 5]))
    write_idx(tmp_path / "tl", np.array([0], np.uint8))
    rc = main(["convert", "--train-images", str(tmp_path / "bad"), "--train-labels", str(tmp_path / "tl"), "--num-classes", "2", "--out", str(tmp_path / "m")])
    assert rc == 2
    assert "offset 2" in capsys.readouterr().err


def test_check_passes(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4 and "FAIL" not in out


def test_run_and_report(tmp_path, capsys):
    cfg = _write_config(tmp_path, scenarios=["NoAug"], rates=[0.5], methods=[CONFIG["methods"][0]])
    assert main(["--deterministic", "run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "table_rate50.txt").exists()
    assert main(["report", "--ledger", str(tmp_path / "run"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "table_rate50.txt").read_text() == (tmp_path / "run" / "table_rate50.txt").read_text()


def test_run_bad_config_exit_code(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dataset": {"synthetic": {}}, "rates": [2.0]}))
    assert main(["run", "--config", str(path)]) == 2


def _ledger_cells(out):
    try:
        return json.loads((out / "ledger.json").read_text())["cells"]
    except (FileNotFoundError, json.JSONDecodeError):
        return {}


@pytest.mark.slow
def test_kill_and_resume(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "run"
    cmd = [sys.executable, "-m", "unlearnlab", "--deterministic", "run", "--config", str(cfg), "--out", str(out)]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL, env=dict(os.environ))
    deadline = time.time() + 300
    done = {}
    while time.time() < deadline and proc.poll() is None:
        cells = _ledger_cells(out)
        done = {k: c for k, c in cells.items() if c["status"] == "complete"}
        if len(done) >= 3:
            break
        time.sleep(0.05)
    assert proc.poll() is None, "run finished before it could be interrupted"
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    snapshot = {k: c["report"] for k, c in _ledger_cells(out).items() if c["status"] == "complete"}
    assert 3 <= len(snapshot) < 16

    result = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
    assert result.returncode == 0, result.stderr
    cells = _ledger_cells(out)
    assert len(cells) == 16 and all(c["status"] in ("complete", "diverged") for c in cells.values())
    for k, report in snapshot.items():
        assert cells[k]["report"] == report  # untouched, including RTE

    fresh = tmp_path / "fresh"
    subprocess.run([*cmd[:-1], str(fresh)], check=True, capture_output=True, timeout=600)
    ref = _ledger_cells(fresh)
    for k, c in cells.items():
        a = {m: v for m, v in c["report"].items() if m != "RTE"}
        b = {m: v for m, v in ref[k]["report"].items() if m != "RTE"}
        assert a == b, k
