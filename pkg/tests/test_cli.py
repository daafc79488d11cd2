import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage

from crossview.cli import main
from crossview.core import read_tensor, write_tensor
from crossview.controls import load_structure_map

CONFIG = Path(__file__).parent / "fixtures" / "omnicity_mini.json"


def run(*argv):
    return main([str(a) for a in argv])


def test_build_controls_outputs(tmp_path, capsys):
    assert run("build-controls", "--config", CONFIG, "--out", tmp_path, "--sample", "block") == 0
    out = tmp_path / "block"
    s = load_structure_map(out / "structure_map.png")
    assert s.bits.shape == (32, 64)
    assert read_tensor(out / "texture_mapping.cvdf").dims == (32, 64, 2)
    assert read_tensor(out / "weight_matrix.cvdf").dims == (128, 64)
    report = json.loads((out / "continuity.json").read_text())
    assert report["sample"] == "block" and report["continuity"]["rows"] == 32
    assert json.loads(capsys.readouterr().out) == report


def test_build_controls_flat_ground(tmp_path):
    assert run("build-controls", "--config", CONFIG, "--out", tmp_path, "--sample", "flat") == 0
    bits = load_structure_map(tmp_path / "flat" / "structure_map.png").bits
    assert not bits[:16].any() and bits[16:].all()
    rep = json.loads((tmp_path / "flat" / "continuity.json").read_text())
    assert rep["continuity"]["differing_bits"] == 0


def test_missing_height_is_a_domain_error(tmp_path, capsys):
    assert run("build-controls", "--config", CONFIG, "--out", tmp_path, "--sample", "nohgt") == 1
    err = capsys.readouterr().err
    assert "nohgt has no height map" in err and "height/*" in err


def test_unknown_sample(tmp_path, capsys):
    assert run("build-controls", "--config", CONFIG, "--out", tmp_path, "--sample", "zzz") == 1
    assert "zzz" in capsys.readouterr().err


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        run("build-controls")
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        run("no-such-command")
    assert info.value.code == 2


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"voxel": {"bogus": 1}}))
    assert run("diffusion-demo", "--config", cfg, "--out", tmp_path) == 1
    assert "bogus" in capsys.readouterr().err
    cfg.write_text(json.dumps({"diffusion": {"steps": 0}}))
    assert run("diffusion-demo", "--config", cfg, "--out", tmp_path) == 1


def test_diffusion_demo(tmp_path):
    assert run("diffusion-demo", "--out", tmp_path, "--steps", 50) == 0
    rep = json.loads((tmp_path / "diffusion_report.json").read_text())
    assert rep["ok"] and rep["max_abs_error"] <= 1e-4 and rep["steps"] == 50


def test_attention_demo_random_and_files(tmp_path):
    assert run("attention-demo", "--out", tmp_path / "a", "--seed", 3) == 0
    rep = json.loads((tmp_path / "a" / "attention_report.json").read_text())
    assert rep["rows_sum_to_one"] and rep["z_shape"] == [128, 16]
    rng = np.random.default_rng(0)
    paths = {}
    for name, shape in {"q": (3, 4), "k": (5, 4), "v": (5, 2), "m": (3, 5)}.items():
        paths[name] = tmp_path / f"{name}.cvdf"
        write_tensor(rng.standard_normal(shape), paths[name])
    args = [f"--{n}={p}" for n, p in paths.items()]
    assert run("attention-demo", "--out", tmp_path / "b", *args) == 0
    assert read_tensor(tmp_path / "b" / "z.cvdf").dims == (3, 2)
    assert run("attention-demo", "--out", tmp_path / "c", args[0]) == 1


def _image_dirs(tmp_path, n=2):
    rng = np.random.default_rng(1)
    for sub in ("pred", "gt"):
        (tmp_path / sub).mkdir()
        for i in range(n):
            PILImage.fromarray((rng.random((16, 32, 3)) * 255).astype(np.uint8)).save(tmp_path / sub / f"{i}.png")
    return tmp_path / "pred", tmp_path / "gt"


def test_metrics_command(tmp_path):
    pred, gt = _image_dirs(tmp_path)
    feats = np.random.default_rng(2).standard_normal((6, 4))
    write_tensor(feats, tmp_path / "f.cvdf")
    assert run("metrics", "--out", tmp_path / "o", "--pred", pred, "--gt", gt,
               "--pred-features", tmp_path / "f.cvdf", "--gt-features", tmp_path / "f.cvdf") == 0
    rep = json.loads((tmp_path / "o" / "metrics.json").read_text())
    assert rep["count"] == 2 and abs(rep["kid"]) <= 1e-6
    assert run("metrics", "--out", tmp_path / "o", "--pred", tmp_path / "missing", "--gt", gt) == 1


def test_gpt_score_mock_with_human_agreement(tmp_path):
    pred, gt = _image_dirs(tmp_path)
    out = tmp_path / "o"
    assert run("gpt-score", "--mock", "--out", out, "--pred", pred, "--gt", gt) == 0
    lines = (out / "scores.jsonl").read_text().splitlines()
    assert [json.loads(l)["id"] for l in lines] == ["0.png", "1.png"]
    human = tmp_path / "human.jsonl"
    human.write_text((out / "scores.jsonl").read_text())
    assert run("gpt-score", "--mock", "--out", out, "--pred", pred, "--gt", gt, "--human", human) == 0
    summary = json.loads((out / "gpt_score_summary.json").read_text())
    assert summary["agreement"]["total"] == 1.0


def test_dataset_scan(tmp_path):
    root = Path(__file__).parent / "fixtures" / "omnicity_mini"
    assert run("dataset-scan", "--out", tmp_path, "--root", root, "--layout", "OmniCity") == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert [s["id"] for s in m["samples"]] == ["block", "city", "flat", "nohgt"]
    assert run("dataset-scan", "--out", tmp_path, "--root", tmp_path / "none") == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "crossview.cli", "diffusion-demo", "--out", str(tmp_path), "--steps", "10"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["ok"] is True
